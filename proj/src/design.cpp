#include "lmmkit/design.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace lmmkit {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// One encoded column under construction.
struct Col {
  std::string name;
  Eigen::VectorXd v;
};

// Contrast codes for one factor: code(level, j) for j in 0..k-2.
double contrast_code(ContrastKind kind, int level, int j, int n_levels) {
  if (kind == ContrastKind::Treatment) {
    // Column j represents the j-th non-reference level; caller maps levels
    // so that the reference is excluded before calling.
    return level == j ? 1.0 : 0.0;
  }
  // Sum coding: level j carries +1 in column j, the last level carries -1.
  if (level == j) return 1.0;
  if (level == n_levels - 1) return -1.0;
  return 0.0;
}

std::string sum_col_name(const std::string& factor, int j) {
  return factor + ".sum" + std::to_string(j + 1);
}

// Encodes the columns of one variable reference over the given rows of ds,
// using the stored level tables and centering offsets.
std::vector<Col> encode_var(const ModelMatrices& mats, const Dataset& ds,
                            const VarRef& var, ContrastKind kind) {
  const Column& c = ds.column(var.name);
  const std::size_t n = ds.n_rows();
  std::vector<Col> out;

  if (c.type == ColumnType::Numeric) {
    double offset = 0.0;
    auto it = mats.centering_offsets.find(var.name);
    if (it != mats.centering_offsets.end()) offset = it->second;
    Col col;
    col.name = var_label(var);
    col.v.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (c.is_missing(i)) {
        col.v[i] = kNaN;
      } else {
        double x = c.numeric[i] - offset;
        double p = x;
        for (int e = 1; e < var.power; ++e) p *= x;
        col.v[i] = p;
      }
    }
    out.push_back(std::move(col));
    return out;
  }

  if (var.power != 1) {
    throw std::invalid_argument("design: power transform I(" + var.name +
                                "^k) requires a numeric column");
  }
  auto lt = mats.factor_levels.find(var.name);
  if (lt == mats.factor_levels.end()) {
    throw std::invalid_argument("design: no level table for factor '" +
                                var.name + "'");
  }
  const std::vector<std::string>& levels = lt->second;
  const int k = static_cast<int>(levels.size());

  // Map each row to an index into the stored (training) level table.
  std::vector<int> row_code(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (c.is_missing(i)) continue;
    const std::string& lab = c.level_of(i);
    auto pos = std::find(levels.begin(), levels.end(), lab);
    if (pos == levels.end()) {
      throw std::invalid_argument("design: factor '" + var.name +
                                  "' has level '" + lab +
                                  "' unseen at build time");
    }
    row_code[i] = static_cast<int>(pos - levels.begin());
  }

  int ref = 0;  // Treatment: alphanumerically first unless overridden
  if (kind == ContrastKind::Treatment) {
    auto rit = mats.contrasts.reference.find(var.name);
    if (rit != mats.contrasts.reference.end()) {
      auto pos = std::find(levels.begin(), levels.end(), rit->second);
      if (pos == levels.end()) {
        throw std::invalid_argument("design: reference level '" + rit->second +
                                    "' is not a level of '" + var.name + "'");
      }
      ref = static_cast<int>(pos - levels.begin());
    }
  }

  for (int j = 0; j < k - 1; ++j) {
    Col col;
    if (kind == ContrastKind::Treatment) {
      // Non-reference levels in table order.
      const int lev = j < ref ? j : j + 1;
      col.name = var.name + "=" + levels[static_cast<std::size_t>(lev)];
      col.v.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        col.v[i] = row_code[i] < 0 ? kNaN : (row_code[i] == lev ? 1.0 : 0.0);
      }
    } else {
      col.name = sum_col_name(var.name, j);
      col.v.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        col.v[i] = row_code[i] < 0 ? kNaN
                                   : contrast_code(ContrastKind::Sum,
                                                   row_code[i], j, k);
      }
    }
    out.push_back(std::move(col));
  }
  return out;
}

// Columns of one term: the elementwise product over its factors, with the
// first factor's contrasts varying fastest.
std::vector<Col> encode_term(const ModelMatrices& mats, const Dataset& ds,
                             const FixedTerm& term, ContrastKind kind) {
  std::vector<Col> acc = encode_var(mats, ds, term.factors[0], kind);
  for (std::size_t f = 1; f < term.factors.size(); ++f) {
    std::vector<Col> next = encode_var(mats, ds, term.factors[f], kind);
    std::vector<Col> merged;
    for (const Col& b : next) {
      for (const Col& a : acc) {
        Col col;
        col.name = a.name + ":" + b.name;
        col.v = a.v.cwiseProduct(b.v);
        merged.push_back(std::move(col));
      }
    }
    acc = std::move(merged);
  }
  return acc;
}

// Grouping labels per row; empty string marks a row with a missing cell.
std::vector<std::string> grouping_labels(const Dataset& ds,
                                         const Grouping& g) {
  const std::size_t n = ds.n_rows();
  std::vector<std::string> out(n);
  std::vector<bool> miss(n, false);
  bool first = true;
  for (const std::string& name : g.factors) {
    const Column& c = ds.column(name);
    if (c.type != ColumnType::Factor) {
      throw std::invalid_argument("design: grouping column '" + name +
                                  "' must be a factor");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (miss[i]) continue;
      if (c.is_missing(i)) {
        miss[i] = true;
        out[i].clear();
      } else if (first) {
        out[i] = c.level_of(i);
      } else {
        out[i] += ":" + c.level_of(i);
      }
    }
    first = false;
  }
  return out;
}

Dataset subset_rows(const Dataset& ds, const std::vector<std::size_t>& rows,
                    const std::vector<std::string>& names) {
  std::vector<Column> cols;
  for (const std::string& name : names) {
    const Column& c = ds.column(name);
    Column s;
    s.name = c.name;
    s.type = c.type;
    s.levels = c.levels;
    s.missing.reserve(rows.size());
    for (std::size_t r : rows) s.missing.push_back(c.missing[r]);
    if (c.type == ColumnType::Numeric) {
      s.numeric.reserve(rows.size());
      for (std::size_t r : rows) s.numeric.push_back(c.numeric[r]);
    } else {
      s.codes.reserve(rows.size());
      for (std::size_t r : rows) s.codes.push_back(c.codes[r]);
    }
    cols.push_back(std::move(s));
  }
  return Dataset(std::move(cols));
}

std::string format_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

ModelMatrices build_matrices(const Dataset& ds, const FormulaAst& ast,
                             const ContrastScheme& contrasts,
                             const CenteringPolicy& centering) {
  if (!ast.expanded) {
    throw std::invalid_argument("design: formula must be expanded first");
  }
  ModelMatrices mats;
  mats.ast = ast;
  mats.contrasts = contrasts;
  mats.response_name = ast.response;
  mats.log_response = ast.log_response;
  mats.has_intercept = ast.intercept;

  const std::vector<std::string> referenced = referenced_columns(ast);
  for (const std::string& name : referenced) {
    if (!ds.has_column(name)) {
      throw std::invalid_argument("design: formula references column '" +
                                  name + "' absent from the data");
    }
  }

  // Listwise deletion over referenced columns only.
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < ds.n_rows(); ++i) {
    bool miss = false;
    for (const std::string& name : referenced) {
      if (ds.column(name).is_missing(i)) { miss = true; break; }
    }
    if (miss) {
      mats.dropped_rows.push_back(i);
    } else {
      kept.push_back(i);
    }
  }
  if (kept.empty()) {
    throw std::invalid_argument(
        "design: no rows left after dropping missing values");
  }
  Dataset kd = subset_rows(ds, kept, referenced);
  const std::size_t n = kd.n_rows();
  mats.n = n;

  // Response.
  const Column& yc = kd.column(ast.response);
  if (yc.type != ColumnType::Numeric) {
    throw std::invalid_argument("design: response '" + ast.response +
                                "' must be numeric");
  }
  mats.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (ast.log_response) {
      if (yc.numeric[i] <= 0.0) {
        throw std::invalid_argument(
            "design: log response requires strictly positive values");
      }
      mats.y[i] = std::log(yc.numeric[i]);
    } else {
      mats.y[i] = yc.numeric[i];
    }
  }

  // Level tables (observed levels over kept rows) and centering offsets.
  auto note_var = [&](const VarRef& v) {
    const Column& c = kd.column(v.name);
    if (c.type == ColumnType::Factor) {
      if (mats.factor_levels.count(v.name)) return;
      std::set<std::int32_t> seen(c.codes.begin(), c.codes.end());
      std::vector<std::string> levels;
      for (std::int32_t code : seen) {
        levels.push_back(c.levels[static_cast<std::size_t>(code)]);
      }
      if (levels.size() < 2) {
        throw std::invalid_argument("design: factor '" + v.name +
                                    "' has fewer than 2 observed levels");
      }
      mats.factor_levels[v.name] = std::move(levels);
    } else {
      if (mats.centering_offsets.count(v.name)) return;
      const Centering pol = centering.for_variable(v.name);
      double offset = 0.0;
      if (pol == Centering::AtFirstObservation) {
        offset = *std::min_element(c.numeric.begin(), c.numeric.end());
      } else if (pol == Centering::AtMean) {
        double s = 0.0;
        for (double x : c.numeric) s += x;
        offset = s / static_cast<double>(n);
      }
      mats.centering_offsets[v.name] = offset;
    }
  };
  for (const FixedTerm& t : ast.fixed_terms) {
    for (const VarRef& v : t.factors) note_var(v);
  }
  for (const RandomTerm& rt : ast.random_terms) {
    for (const FixedTerm& t : rt.inner_terms) {
      for (const VarRef& v : t.factors) note_var(v);
    }
  }

  // Fixed design.
  std::vector<Col> xcols;
  if (ast.intercept) {
    Col c;
    c.name = "(Intercept)";
    c.v = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
    xcols.push_back(std::move(c));
  }
  for (const FixedTerm& t : ast.fixed_terms) {
    FixedTermInfo info;
    info.name = term_label(t);
    info.start = static_cast<int>(xcols.size());
    std::vector<Col> cols = encode_term(mats, kd, t, contrasts.kind);
    info.len = static_cast<int>(cols.size());
    for (Col& c : cols) xcols.push_back(std::move(c));
    mats.fixed_terms.push_back(std::move(info));
  }
  if (xcols.empty()) {
    throw std::invalid_argument("design: fixed design has no columns "
                                "(intercept removed with no terms)");
  }
  const std::size_t p = xcols.size();
  mats.X.resize(n, p);
  for (std::size_t j = 0; j < p; ++j) {
    mats.X.col(static_cast<Eigen::Index>(j)) = xcols[j].v;
    mats.x_names.push_back(xcols[j].name);
  }

  // Random blocks: level-major sparse indicator-times-inner-design.
  for (const RandomTerm& rt : ast.random_terms) {
    ZBlock block;
    block.grouping_name = grouping_label(rt.grouping());
    block.correlated = rt.correlated;

    std::vector<std::string> labels = grouping_labels(kd, rt.grouping());
    std::set<std::string> uniq(labels.begin(), labels.end());
    block.levels.assign(uniq.begin(), uniq.end());
    if (block.levels.size() < 2) {
      throw std::invalid_argument("design: grouping factor '" +
                                  block.grouping_name +
                                  "' has fewer than 2 levels");
    }
    std::unordered_map<std::string, std::int32_t> index;
    for (std::size_t i = 0; i < block.levels.size(); ++i) {
      index[block.levels[i]] = static_cast<std::int32_t>(i);
    }
    block.row_level.resize(n);
    for (std::size_t i = 0; i < n; ++i) block.row_level[i] = index[labels[i]];

    std::vector<Col> inner;
    if (rt.intercept) {
      Col c;
      c.name = "(Intercept)";
      c.v = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
      inner.push_back(std::move(c));
    }
    for (const FixedTerm& t : rt.inner_terms) {
      std::vector<Col> cols = encode_term(mats, kd, t, contrasts.kind);
      for (Col& c : cols) inner.push_back(std::move(c));
    }
    if (inner.empty()) {
      throw std::invalid_argument("design: random term for '" +
                                  block.grouping_name +
                                  "' has an empty inner design");
    }
    block.k = static_cast<int>(inner.size());
    for (const Col& c : inner) block.col_names.push_back(c.name);

    const int l = block.n_levels();
    block.Z.resize(static_cast<Eigen::Index>(n),
                   static_cast<Eigen::Index>(block.k) * l);
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(n * static_cast<std::size_t>(block.k));
    for (std::size_t i = 0; i < n; ++i) {
      const int base = block.row_level[i] * block.k;
      for (int j = 0; j < block.k; ++j) {
        // Structural entry even when the value is zero: the sparsity
        // pattern then depends only on the grouping, not the data values.
        trips.emplace_back(static_cast<int>(i), base + j,
                           inner[static_cast<std::size_t>(j)]
                               .v[static_cast<Eigen::Index>(i)]);
      }
    }
    block.Z.setFromTriplets(trips.begin(), trips.end());
    mats.blocks.push_back(std::move(block));
  }

  // Covariance parameter layout: per term the lower triangle column-major,
  // or the diagonal only for uncorrelated terms.
  for (std::size_t b = 0; b < mats.blocks.size(); ++b) {
    const int k = mats.blocks[b].k;
    if (mats.blocks[b].correlated) {
      for (int c = 0; c < k; ++c) {
        for (int r = c; r < k; ++r) {
          mats.theta_layout.push_back({static_cast<int>(b), r, c});
        }
      }
    } else {
      for (int d = 0; d < k; ++d) {
        mats.theta_layout.push_back({static_cast<int>(b), d, d});
      }
    }
  }

  // Full-column-rank check; deficiencies name the dependent columns.
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(mats.X);
  const auto rank = qr.rank();
  if (rank < static_cast<Eigen::Index>(p)) {
    const auto& perm = qr.colsPermutation().indices();
    std::string names;
    for (Eigen::Index j = rank; j < static_cast<Eigen::Index>(p); ++j) {
      if (!names.empty()) names += ", ";
      names += mats.x_names[static_cast<std::size_t>(perm[j])];
    }
    throw std::invalid_argument(
        "design: fixed design matrix is rank deficient; columns {" + names +
        "} are linearly dependent on the others");
  }

  // Marginal-hypothesis contrasts: express each term's sum-to-zero
  // coefficients as a linear map of the fitted coefficients; the rows of
  // the inverse map state "this term's marginal effects are all zero".
  if (!mats.fixed_terms.empty()) {
    Eigen::MatrixXd xsum(n, p);
    Eigen::Index at = 0;
    if (ast.intercept) {
      xsum.col(0) = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
      at = 1;
    }
    for (const FixedTerm& t : ast.fixed_terms) {
      std::vector<Col> cols = encode_term(mats, kd, t, ContrastKind::Sum);
      for (Col& c : cols) xsum.col(at++) = c.v;
    }
    Eigen::MatrixXd M = qr.solve(xsum);
    const double misfit = (mats.X * M - xsum).norm();
    if (misfit <= 1e-8 * (1.0 + xsum.norm())) {
      Eigen::MatrixXd Minv = M.inverse();
      for (FixedTermInfo& info : mats.fixed_terms) {
        info.hypothesis = Minv.middleRows(info.start, info.len);
      }
    } else {
      mats.hypothesis_exact = false;
      for (FixedTermInfo& info : mats.fixed_terms) {
        info.hypothesis = Eigen::MatrixXd::Zero(info.len,
                                                static_cast<Eigen::Index>(p));
        for (int r = 0; r < info.len; ++r) {
          info.hypothesis(r, info.start + r) = 1.0;
        }
      }
    }
  }
  return mats;
}

std::size_t count_random_effects(const ModelMatrices& mats) {
  std::size_t total = 0;
  for (const ZBlock& b : mats.blocks) {
    total += static_cast<std::size_t>(b.n_coefs());
  }
  return total;
}

std::size_t max_term_random_effects(const ModelMatrices& mats) {
  std::size_t most = 0;
  for (const ZBlock& b : mats.blocks) {
    most = std::max(most, static_cast<std::size_t>(b.n_coefs()));
  }
  return most;
}

Eigen::MatrixXd encode_fixed_rows(const ModelMatrices& mats,
                                  const Dataset& ds) {
  const std::size_t n = ds.n_rows();
  const std::size_t p = mats.p();
  Eigen::MatrixXd X(n, p);
  Eigen::Index at = 0;
  if (mats.has_intercept) {
    X.col(0) = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
    at = 1;
  }
  for (const FixedTerm& t : mats.ast.fixed_terms) {
    std::vector<Col> cols = encode_term(mats, ds, t, mats.contrasts.kind);
    for (Col& c : cols) X.col(at++) = c.v;
  }
  return X;
}

std::vector<std::int32_t> encode_grouping_rows(const ModelMatrices& mats,
                                               std::size_t block,
                                               const Dataset& ds) {
  const ZBlock& b = mats.blocks[block];
  std::vector<std::string> labels =
      grouping_labels(ds, mats.ast.random_terms[block].grouping());
  std::vector<std::int32_t> out(ds.n_rows(), -1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].empty()) continue;
    auto pos = std::find(b.levels.begin(), b.levels.end(), labels[i]);
    if (pos != b.levels.end()) {
      out[i] = static_cast<std::int32_t>(pos - b.levels.begin());
    }
  }
  return out;
}

Eigen::MatrixXd encode_inner_rows(const ModelMatrices& mats,
                                  std::size_t block, const Dataset& ds) {
  const RandomTerm& rt = mats.ast.random_terms[block];
  const std::size_t n = ds.n_rows();
  Eigen::MatrixXd out(n, mats.blocks[block].k);
  Eigen::Index at = 0;
  if (rt.intercept) {
    out.col(0) = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
    at = 1;
  }
  for (const FixedTerm& t : rt.inner_terms) {
    std::vector<Col> cols = encode_term(mats, ds, t, mats.contrasts.kind);
    for (Col& c : cols) out.col(at++) = c.v;
  }
  return out;
}

std::string dump_x_csv(const ModelMatrices& mats) {
  std::string out;
  for (std::size_t j = 0; j < mats.x_names.size(); ++j) {
    if (j) out += ",";
    out += mats.x_names[j];
  }
  out += "\n";
  for (Eigen::Index i = 0; i < mats.X.rows(); ++i) {
    for (Eigen::Index j = 0; j < mats.X.cols(); ++j) {
      if (j) out += ",";
      out += format_g(mats.X(i, j));
    }
    out += "\n";
  }
  return out;
}

std::string dump_z_csv(const ModelMatrices& mats) {
  std::string out;
  bool first = true;
  for (const ZBlock& b : mats.blocks) {
    for (const std::string& lev : b.levels) {
      for (const std::string& cn : b.col_names) {
        if (!first) out += ",";
        first = false;
        out += b.grouping_name + "=" + lev +
               (cn == "(Intercept)" ? "" : ":" + cn);
      }
    }
  }
  out += "\n";
  std::vector<Eigen::MatrixXd> dense;
  for (const ZBlock& b : mats.blocks) dense.emplace_back(b.Z);
  for (std::size_t i = 0; i < mats.n; ++i) {
    first = true;
    for (const Eigen::MatrixXd& d : dense) {
      for (Eigen::Index j = 0; j < d.cols(); ++j) {
        if (!first) out += ",";
        first = false;
        out += format_g(d(static_cast<Eigen::Index>(i), j));
      }
    }
    out += "\n";
  }
  return out;
}

}  // namespace lmmkit
