#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace lmmkit {

enum class ColumnType { Numeric, Factor };

// One column of a dataset. Factor codes index into `levels` (alphanumeric
// sort order); a code of -1 marks a missing cell. Numeric missing cells are
// NaN with the parallel `missing` flag set.
struct Column {
  std::string name;
  ColumnType type = ColumnType::Numeric;
  std::vector<double> numeric;        // valid iff type == Numeric
  std::vector<std::int32_t> codes;    // valid iff type == Factor
  std::vector<std::string> levels;    // valid iff type == Factor
  std::vector<bool> missing;

  std::size_t size() const {
    return type == ColumnType::Numeric ? numeric.size() : codes.size();
  }
  bool is_missing(std::size_t i) const { return missing[i]; }
  const std::string& level_of(std::size_t i) const {
    return levels[static_cast<std::size_t>(codes[i])];
  }
};

// Immutable rectangular dataset. All mutation happens at construction; the
// accessors hand out const references only.
class Dataset {
public:
  Dataset() = default;
  explicit Dataset(std::vector<Column> columns);

  std::size_t n_rows() const { return n_rows_; }
  std::size_t n_cols() const { return columns_.size(); }
  bool has_column(const std::string& name) const;
  const Column& column(const std::string& name) const;
  const Column& column(std::size_t i) const { return columns_[i]; }
  const std::vector<Column>& columns() const { return columns_; }
  std::vector<std::string> column_names() const;

private:
  std::vector<Column> columns_;
  std::size_t n_rows_ = 0;
};

struct CsvOptions {
  char delimiter = ',';
  std::string na_marker = "NA";
  // Column name -> forced type; anything absent is inferred.
  std::map<std::string, ColumnType> type_overrides;
};

// RFC 4180 style reader. A column is Numeric iff every non-missing cell
// parses as a finite real; otherwise it is a Factor with alphanumerically
// sorted levels. Ragged rows and duplicate header names are errors.
Dataset read_csv(const std::string& path, const CsvOptions& opts = {});
Dataset read_csv_text(const std::string& text, const CsvOptions& opts = {});

// Numeric cells are written with enough digits to round-trip exactly.
void write_csv(const Dataset& data, const std::string& path,
               const CsvOptions& opts = {});
std::string write_csv_text(const Dataset& data, const CsvOptions& opts = {});

// Contingency table of two factor columns. Rows follow `a`'s levels, columns
// follow `b`'s; rows where either cell is missing are dropped.
struct CrossTab {
  std::vector<std::string> row_levels;
  std::vector<std::string> col_levels;
  std::vector<std::vector<std::int64_t>> counts;  // [row][col]
};

CrossTab cross_tabulate(const Dataset& data, const std::string& a,
                        const std::string& b);

enum class FactorRelation { FullyCrossed, NestedAinB, NestedBinA,
                            PartiallyCrossed };

const char* to_string(FactorRelation r);

// Classifies the observed co-occurrence pattern of two factors from their
// contingency table. Zero cells in a row/column pattern consistent with one
// factor's levels living inside the other's mean nesting; an all-nonzero
// table is fully crossed; anything else is partially crossed.
FactorRelation classify_relation(const CrossTab& tab);
FactorRelation classify_relation(const Dataset& data, const std::string& a,
                                 const std::string& b);

// New factor whose levels are the observed combinations of the inputs,
// joined by `sep`, sorted alphanumerically. A missing cell in any input
// yields a missing cell in the result.
Column concat_factors(const Dataset& data,
                      const std::vector<std::string>& names,
                      const std::string& result_name,
                      const std::string& sep = ":");

}  // namespace lmmkit
