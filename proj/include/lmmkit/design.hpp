#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lmmkit/dataframe.hpp"
#include "lmmkit/formula.hpp"

namespace lmmkit {

enum class ContrastKind { Treatment, Sum };

// Treatment coding compares each level against a reference (alphanumerically
// first unless overridden); Sum coding constrains effects to sum to zero
// with the last level carrying -1. Either way a k-level factor spends k-1
// columns.
struct ContrastScheme {
  ContrastKind kind = ContrastKind::Treatment;
  std::map<std::string, std::string> reference;  // per-factor override
};

enum class Centering { None, AtFirstObservation, AtMean };

// Centering applies to numeric variables before power transforms.
// AtFirstObservation subtracts the variable's minimum over the kept rows
// (the earliest observation), which keeps the design independent of row
// order; AtMean subtracts the mean over kept rows.
struct CenteringPolicy {
  Centering default_policy = Centering::None;
  std::map<std::string, Centering> per_variable;

  Centering for_variable(const std::string& name) const {
    auto it = per_variable.find(name);
    return it == per_variable.end() ? default_policy : it->second;
  }
};

// One random-effects term realized against the data: an n x (k*l) sparse
// block whose columns are level-major (all k inner columns of level 0,
// then level 1, ...).
struct ZBlock {
  std::string grouping_name;             // e.g. "subject" or "subject:cond"
  std::vector<std::string> levels;       // l observed grouping levels
  int k = 0;                             // inner columns per level
  std::vector<std::string> col_names;    // the k inner column names
  bool correlated = true;                // false for the || form
  Eigen::SparseMatrix<double> Z;         // n x (k*l)
  std::vector<std::int32_t> row_level;   // grouping level index per row

  int n_levels() const { return static_cast<int>(levels.size()); }
  int n_coefs() const { return k * n_levels(); }
};

// Position of one covariance parameter inside its term's k x k
// lower-triangular relative factor. Diagonal entries are bounded below at
// zero; off-diagonals are free and absent for uncorrelated terms.
struct ThetaEntry {
  int term = 0;
  int row = 0;
  int col = 0;

  bool diagonal() const { return row == col; }
};

// Span of one fixed term's columns in X, plus the contrast matrix whose
// rows state the "term equals zero" hypothesis in sum-to-zero coordinates
// (the marginal-effect hypothesis a factorial ANOVA tests).
struct FixedTermInfo {
  std::string name;
  int start = 0;
  int len = 0;
  Eigen::MatrixXd hypothesis;  // len x p
};

struct ModelMatrices {
  Eigen::VectorXd y;
  Eigen::MatrixXd X;
  std::vector<std::string> x_names;
  std::vector<FixedTermInfo> fixed_terms;   // excludes the intercept
  bool has_intercept = true;
  std::vector<ZBlock> blocks;
  std::vector<ThetaEntry> theta_layout;
  std::vector<std::size_t> dropped_rows;    // original row indices
  std::size_t n = 0;

  // Re-coding support for predict on new data.
  FormulaAst ast;                           // expanded
  ContrastScheme contrasts;
  std::map<std::string, double> centering_offsets;
  std::map<std::string, std::vector<std::string>> factor_levels;
  std::string response_name;
  bool log_response = false;
  // False when the sum-to-zero reparameterization does not span X (only
  // possible for non-hierarchical formulas); hypotheses then test the
  // term's own columns directly.
  bool hypothesis_exact = true;

  std::size_t p() const { return static_cast<std::size_t>(X.cols()); }
  std::size_t n_theta() const { return theta_layout.size(); }
};

// Builds y, X, and the per-term Z blocks from an expanded formula. Rows
// with a missing value in any referenced column are dropped and recorded.
// X is checked for full column rank; a deficiency is a hard error naming
// the dependent columns.
ModelMatrices build_matrices(const Dataset& ds, const FormulaAst& ast,
                             const ContrastScheme& contrasts = {},
                             const CenteringPolicy& centering = {});

// Total number of random-effect coefficients, summed over blocks.
std::size_t count_random_effects(const ModelMatrices& mats);

// Largest single term's coefficient count; the identifiability check the
// fitter applies is per term.
std::size_t max_term_random_effects(const ModelMatrices& mats);

// Fixed-effect rows of new data coded exactly as the training design
// (same contrasts, centering offsets, and level tables). Unseen factor
// levels are an error.
Eigen::MatrixXd encode_fixed_rows(const ModelMatrices& mats,
                                  const Dataset& ds);

// Per-row grouping level index for one block on new data; -1 marks levels
// unseen at training time.
std::vector<std::int32_t> encode_grouping_rows(const ModelMatrices& mats,
                                               std::size_t block,
                                               const Dataset& ds);

// Inner random-design values (the k columns of one block) for new data.
Eigen::MatrixXd encode_inner_rows(const ModelMatrices& mats,
                                  std::size_t block, const Dataset& ds);

// Dense CSV dumps for inspection.
std::string dump_x_csv(const ModelMatrices& mats);
std::string dump_z_csv(const ModelMatrices& mats);

}  // namespace lmmkit
