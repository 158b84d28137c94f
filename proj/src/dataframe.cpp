#include "lmmkit/dataframe.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace lmmkit {

namespace {

// Raw parsed CSV: header plus string cells.
struct RawTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

RawTable parse_csv(const std::string& text, char delim) {
  RawTable out;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_was_quoted = false;
  bool any_field = false;

  auto end_field = [&] {
    record.push_back(field);
    field.clear();
    field_was_quoted = false;
    any_field = true;
  };
  auto end_record = [&] {
    // A line with no delimiter and an empty unquoted field is blank.
    if (!any_field && field.empty() && !field_was_quoted) return;
    end_field();
    if (out.header.empty()) {
      out.header = record;
    } else {
      out.rows.push_back(record);
    }
    record.clear();
    any_field = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"' && field.empty() && !field_was_quoted) {
      in_quotes = true;
      field_was_quoted = true;
    } else if (c == delim) {
      end_field();
    } else if (c == '\r') {
      // swallowed; \r\n handled at the \n
    } else if (c == '\n') {
      end_record();
    } else {
      field.push_back(c);
    }
  }
  if (in_quotes) throw std::invalid_argument("csv: unterminated quoted field");
  if (!field.empty() || field_was_quoted || any_field) end_record();
  return out;
}

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(*b))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(e[-1]))) --e;
  if (b == e) return false;
  auto [ptr, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && ptr == e && std::isfinite(out);
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

Column make_factor(const std::string& name,
                   const std::vector<std::string>& cells,
                   const std::vector<bool>& missing) {
  Column col;
  col.name = name;
  col.type = ColumnType::Factor;
  col.missing = missing;
  std::set<std::string> uniq;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!missing[i]) uniq.insert(cells[i]);
  }
  col.levels.assign(uniq.begin(), uniq.end());
  std::unordered_map<std::string, std::int32_t> index;
  for (std::size_t i = 0; i < col.levels.size(); ++i) {
    index[col.levels[i]] = static_cast<std::int32_t>(i);
  }
  col.codes.resize(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    col.codes[i] = missing[i] ? -1 : index[cells[i]];
  }
  return col;
}

std::string format_numeric(double v) {
  char buf[40];
  // Integral values print plainly (60, not 6e+01).
  if (v == std::floor(v) && std::fabs(v) < 9.007199254740992e15) {
    std::snprintf(buf, sizeof(buf), "%.0f", v);
    return buf;
  }
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  // Shortest representation that round-trips.
  for (int prec = 1; prec < 17; ++prec) {
    char t[40];
    std::snprintf(t, sizeof(t), "%.*g", prec, v);
    double back;
    if (parse_double(t, back) && back == v) return t;
  }
  return buf;
}

bool needs_quoting(const std::string& s, char delim) {
  return s.find(delim) != std::string::npos ||
         s.find('"') != std::string::npos ||
         s.find('\n') != std::string::npos ||
         s.find('\r') != std::string::npos;
}

std::string quote_field(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

}  // namespace

Dataset::Dataset(std::vector<Column> columns) : columns_(std::move(columns)) {
  if (!columns_.empty()) n_rows_ = columns_[0].size();
  std::set<std::string> seen;
  for (const auto& c : columns_) {
    if (c.size() != n_rows_) {
      throw std::invalid_argument("dataset: column '" + c.name +
                                  "' length differs from the first column");
    }
    if (c.missing.size() != n_rows_) {
      throw std::invalid_argument("dataset: column '" + c.name +
                                  "' missing-mask length mismatch");
    }
    if (!seen.insert(c.name).second) {
      throw std::invalid_argument("dataset: duplicate column name '" + c.name +
                                  "'");
    }
  }
}

bool Dataset::has_column(const std::string& name) const {
  for (const auto& c : columns_) {
    if (c.name == name) return true;
  }
  return false;
}

const Column& Dataset::column(const std::string& name) const {
  for (const auto& c : columns_) {
    if (c.name == name) return c;
  }
  throw std::invalid_argument("dataset: no column named '" + name + "'");
}

std::vector<std::string> Dataset::column_names() const {
  std::vector<std::string> out;
  out.reserve(columns_.size());
  for (const auto& c : columns_) out.push_back(c.name);
  return out;
}

Dataset read_csv_text(const std::string& text, const CsvOptions& opts) {
  RawTable raw = parse_csv(text, opts.delimiter);
  if (raw.header.empty()) throw std::invalid_argument("csv: empty input");

  std::set<std::string> seen;
  for (auto& h : raw.header) {
    h = trim(h);
    if (h.empty()) throw std::invalid_argument("csv: empty header name");
    if (!seen.insert(h).second) {
      throw std::invalid_argument("csv: duplicate header name '" + h + "'");
    }
  }
  const std::size_t ncol = raw.header.size();
  for (std::size_t r = 0; r < raw.rows.size(); ++r) {
    if (raw.rows[r].size() != ncol) {
      throw std::invalid_argument(
          "csv: row " + std::to_string(r + 2) + " has " +
          std::to_string(raw.rows[r].size()) + " fields, expected " +
          std::to_string(ncol));
    }
  }

  const std::size_t nrow = raw.rows.size();
  std::vector<Column> columns;
  columns.reserve(ncol);
  for (std::size_t j = 0; j < ncol; ++j) {
    std::vector<std::string> cells(nrow);
    std::vector<bool> missing(nrow, false);
    for (std::size_t r = 0; r < nrow; ++r) {
      cells[r] = trim(raw.rows[r][j]);
      missing[r] = cells[r].empty() || cells[r] == opts.na_marker;
    }

    ColumnType type;
    auto it = opts.type_overrides.find(raw.header[j]);
    if (it != opts.type_overrides.end()) {
      type = it->second;
    } else {
      bool all_numeric = true;
      bool any_present = false;
      for (std::size_t r = 0; r < nrow; ++r) {
        if (missing[r]) continue;
        any_present = true;
        double v;
        if (!parse_double(cells[r], v)) {
          all_numeric = false;
          break;
        }
      }
      type = (all_numeric && any_present) ? ColumnType::Numeric
                                          : ColumnType::Factor;
    }

    if (type == ColumnType::Numeric) {
      Column col;
      col.name = raw.header[j];
      col.type = ColumnType::Numeric;
      col.missing = missing;
      col.numeric.resize(nrow);
      for (std::size_t r = 0; r < nrow; ++r) {
        if (missing[r]) {
          col.numeric[r] = std::numeric_limits<double>::quiet_NaN();
        } else {
          double v;
          if (!parse_double(cells[r], v)) {
            throw std::invalid_argument("csv: column '" + col.name +
                                        "' forced Numeric but cell '" +
                                        cells[r] + "' does not parse");
          }
          col.numeric[r] = v;
        }
      }
      columns.push_back(std::move(col));
    } else {
      columns.push_back(make_factor(raw.header[j], cells, missing));
    }
  }
  return Dataset(std::move(columns));
}

Dataset read_csv(const std::string& path, const CsvOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("csv: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return read_csv_text(ss.str(), opts);
}

std::string write_csv_text(const Dataset& data, const CsvOptions& opts) {
  std::string out;
  for (std::size_t j = 0; j < data.n_cols(); ++j) {
    if (j) out.push_back(opts.delimiter);
    const std::string& h = data.column(j).name;
    out += needs_quoting(h, opts.delimiter) ? quote_field(h) : h;
  }
  out.push_back('\n');
  for (std::size_t r = 0; r < data.n_rows(); ++r) {
    for (std::size_t j = 0; j < data.n_cols(); ++j) {
      if (j) out.push_back(opts.delimiter);
      const Column& c = data.column(j);
      if (c.is_missing(r)) {
        out += opts.na_marker;
      } else if (c.type == ColumnType::Numeric) {
        out += format_numeric(c.numeric[r]);
      } else {
        const std::string& s = c.level_of(r);
        out += needs_quoting(s, opts.delimiter) ? quote_field(s) : s;
      }
    }
    out.push_back('\n');
  }
  return out;
}

void write_csv(const Dataset& data, const std::string& path,
               const CsvOptions& opts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("csv: cannot open '" + path +
                                     "' for writing");
  out << write_csv_text(data, opts);
}

CrossTab cross_tabulate(const Dataset& data, const std::string& a,
                        const std::string& b) {
  const Column& ca = data.column(a);
  const Column& cb = data.column(b);
  if (ca.type != ColumnType::Factor || cb.type != ColumnType::Factor) {
    throw std::invalid_argument("cross_tabulate: both columns must be factors");
  }
  CrossTab tab;
  tab.row_levels = ca.levels;
  tab.col_levels = cb.levels;
  tab.counts.assign(ca.levels.size(),
                    std::vector<std::int64_t>(cb.levels.size(), 0));
  for (std::size_t r = 0; r < data.n_rows(); ++r) {
    if (ca.is_missing(r) || cb.is_missing(r)) continue;
    ++tab.counts[static_cast<std::size_t>(ca.codes[r])]
                [static_cast<std::size_t>(cb.codes[r])];
  }
  return tab;
}

const char* to_string(FactorRelation r) {
  switch (r) {
    case FactorRelation::FullyCrossed: return "FullyCrossed";
    case FactorRelation::NestedAinB: return "NestedAinB";
    case FactorRelation::NestedBinA: return "NestedBinA";
    case FactorRelation::PartiallyCrossed: return "PartiallyCrossed";
  }
  return "?";
}

FactorRelation classify_relation(const CrossTab& tab) {
  const std::size_t nr = tab.row_levels.size();
  const std::size_t nc = tab.col_levels.size();
  if (nr == 0 || nc == 0) return FactorRelation::FullyCrossed;

  bool any_zero = false;
  for (std::size_t i = 0; i < nr; ++i) {
    for (std::size_t j = 0; j < nc; ++j) {
      if (tab.counts[i][j] == 0) any_zero = true;
    }
  }
  if (!any_zero) return FactorRelation::FullyCrossed;

  // A nested in B: every level of A appears with exactly one level of B.
  bool a_in_b = true;
  for (std::size_t i = 0; i < nr; ++i) {
    std::size_t hits = 0;
    for (std::size_t j = 0; j < nc; ++j) {
      if (tab.counts[i][j] > 0) ++hits;
    }
    if (hits > 1) { a_in_b = false; break; }
  }
  bool b_in_a = true;
  for (std::size_t j = 0; j < nc; ++j) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < nr; ++i) {
      if (tab.counts[i][j] > 0) ++hits;
    }
    if (hits > 1) { b_in_a = false; break; }
  }
  // Mutual nesting (a bijection between observed levels) carries no grouping
  // information either way; report it as crossed.
  if (a_in_b && b_in_a) return FactorRelation::FullyCrossed;
  if (a_in_b) return FactorRelation::NestedAinB;
  if (b_in_a) return FactorRelation::NestedBinA;
  return FactorRelation::PartiallyCrossed;
}

FactorRelation classify_relation(const Dataset& data, const std::string& a,
                                 const std::string& b) {
  return classify_relation(cross_tabulate(data, a, b));
}

Column concat_factors(const Dataset& data,
                      const std::vector<std::string>& names,
                      const std::string& result_name, const std::string& sep) {
  if (names.empty()) {
    throw std::invalid_argument("concat_factors: need at least one column");
  }
  std::vector<const Column*> cols;
  for (const auto& n : names) {
    const Column& c = data.column(n);
    if (c.type != ColumnType::Factor) {
      throw std::invalid_argument("concat_factors: column '" + n +
                                  "' is not a factor");
    }
    cols.push_back(&c);
  }
  const std::size_t nrow = data.n_rows();
  std::vector<std::string> cells(nrow);
  std::vector<bool> missing(nrow, false);
  for (std::size_t r = 0; r < nrow; ++r) {
    std::string combo;
    for (std::size_t k = 0; k < cols.size(); ++k) {
      if (cols[k]->is_missing(r)) {
        missing[r] = true;
        break;
      }
      if (k) combo += sep;
      combo += cols[k]->level_of(r);
    }
    if (!missing[r]) cells[r] = std::move(combo);
  }
  return make_factor(result_name, cells, missing);
}

}  // namespace lmmkit
