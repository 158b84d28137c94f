#include "lmmkit/inference.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "lmmkit/distributions.hpp"

namespace lmmkit {

namespace {

const double kNan = std::numeric_limits<double>::quiet_NaN();

}  // namespace

AnovaTable anova_satterthwaite(const LmmFit& fit) {
  if (!fit.converged) {
    throw std::invalid_argument("F tests need a converged fit");
  }
  AnovaTable table;
  table.source = AnovaSource::MixedSatterthwaite;
  if (fit.singular) {
    table.warnings.push_back(
        "boundary (singular) fit: some variance components are on the "
        "boundary and the denominator degrees of freedom may be unreliable");
  }
  const ModelMatrices& mats = fit.mats;
  if (mats.fixed_terms.empty()) return table;

  PlsContext ctx(mats);
  const int nth = static_cast<int>(mats.n_theta());
  const int nvp = nth + 1;

  Eigen::VectorXd vp(nvp);
  vp.head(nth) = fit.theta;
  vp[nth] = 0.5 * std::log(fit.sigma2);

  auto dev_at = [&](const Eigen::VectorXd& v) {
    return ctx.deviance_at(v.head(nth), v[nth], fit.method);
  };
  auto cov_at = [&](const Eigen::VectorXd& v) {
    const PlsContext::Solution s = ctx.solve(v.head(nth));
    return Eigen::MatrixXd(std::exp(2.0 * v[nth]) * s.unscaled_vcov);
  };

  // Curvature of the deviance in (theta, log sigma), by central
  // differences with a parameter-relative step.
  Eigen::VectorXd h(nvp);
  for (int i = 0; i < nvp; ++i) {
    h[i] = 1e-4 * std::max(std::abs(vp[i]), 1.0);
  }
  Eigen::MatrixXd hess(nvp, nvp);
  const double f0 = dev_at(vp);
  for (int i = 0; i < nvp; ++i) {
    Eigen::VectorXd up = vp, dn = vp;
    up[i] += h[i];
    dn[i] -= h[i];
    hess(i, i) = (dev_at(up) - 2.0 * f0 + dev_at(dn)) / (h[i] * h[i]);
  }
  for (int i = 0; i < nvp; ++i) {
    for (int j = i + 1; j < nvp; ++j) {
      Eigen::VectorXd pp = vp, pm = vp, mp = vp, mm = vp;
      pp[i] += h[i]; pp[j] += h[j];
      pm[i] += h[i]; pm[j] -= h[j];
      mp[i] -= h[i]; mp[j] += h[j];
      mm[i] -= h[i]; mm[j] -= h[j];
      hess(i, j) = hess(j, i) =
          (dev_at(pp) - dev_at(pm) - dev_at(mp) + dev_at(mm)) /
          (4.0 * h[i] * h[j]);
    }
  }

  // Asymptotic covariance of the variance parameters is twice the inverse
  // curvature; without positive definiteness there is no usable covariance
  // and every df2 falls back to the residual degrees of freedom.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> hes(hess);
  const bool pd = hes.info() == Eigen::Success &&
                  hes.eigenvalues().allFinite() &&
                  hes.eigenvalues().minCoeff() > 0.0;
  Eigen::MatrixXd acov;
  std::vector<Eigen::MatrixXd> dcov;
  if (pd) {
    acov = 2.0 * hes.eigenvectors() *
           hes.eigenvalues().cwiseInverse().asDiagonal() *
           hes.eigenvectors().transpose();
    for (int i = 0; i < nvp; ++i) {
      Eigen::VectorXd up = vp, dn = vp;
      up[i] += h[i];
      dn[i] -= h[i];
      dcov.push_back((cov_at(up) - cov_at(dn)) / (2.0 * h[i]));
    }
  } else {
    table.df_fallback = true;
    table.warnings.push_back(
        "variance-parameter curvature is not positive definite; "
        "denominator degrees of freedom fall back to the residual count");
  }

  const double resid_df = double(ctx.n() - ctx.p());
  const Eigen::MatrixXd& cbeta = fit.vcov_beta;
  const double eig_tol_rel = std::sqrt(std::numeric_limits<double>::epsilon());

  for (const FixedTermInfo& ft : mats.fixed_terms) {
    FTestRow row;
    row.term = ft.name;
    const Eigen::MatrixXd& lmat = ft.hypothesis;  // len x p
    const Eigen::MatrixXd vl = lmat * cbeta * lmat.transpose();

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(vl);
    const Eigen::Index len = vl.rows();
    // Decreasing eigenvalue order.
    Eigen::VectorXd d(len);
    Eigen::MatrixXd pvec(len, len);
    for (Eigen::Index i = 0; i < len; ++i) {
      d[i] = es.eigenvalues()[len - 1 - i];
      pvec.col(i) = es.eigenvectors().col(len - 1 - i);
    }
    const double tol = std::max(eig_tol_rel * d[0], 0.0);
    int q = 0;
    while (q < len && d[q] > tol) ++q;
    if (q == 0) {
      row.defined = false;
      row.f_value = kNan;
      row.p_value = kNan;
      table.rows.push_back(row);
      continue;
    }

    const Eigen::MatrixXd ptl =
        pvec.leftCols(q).transpose() * lmat;  // q x p contrasts
    const Eigen::VectorXd proj = ptl * fit.beta;
    double fsum = 0.0;
    for (int m = 0; m < q; ++m) fsum += proj[m] * proj[m] / d[m];
    row.f_value = fsum / q;
    row.df1 = q;

    if (!pd) {
      row.df2 = resid_df;
    } else {
      // Per-contrast df: variance of each contrast variance propagated
      // through the parameter covariance.
      std::vector<double> nu(static_cast<std::size_t>(q));
      for (int m = 0; m < q; ++m) {
        Eigen::VectorXd grad(nvp);
        for (int i = 0; i < nvp; ++i) {
          grad[i] = ptl.row(m) * dcov[static_cast<std::size_t>(i)] *
                    ptl.row(m).transpose();
        }
        const double var_t2 = grad.dot(acov * grad);
        nu[static_cast<std::size_t>(m)] =
            var_t2 > 0.0 ? 2.0 * d[m] * d[m] / var_t2
                         : std::numeric_limits<double>::infinity();
      }
      if (q == 1) {
        row.df2 = std::isfinite(nu[0]) ? nu[0] : resid_df;
      } else {
        double e = 0.0;
        for (double v : nu) {
          if (v > 2.0) e += std::isfinite(v) ? v / (v - 2.0) : 1.0;
        }
        row.df2 = e > double(q) ? 2.0 * e / (e - double(q)) : 0.0;
      }
    }

    if (row.df2 > 0.0) {
      row.p_value = f_tail(row.f_value, double(row.df1), row.df2);
    } else {
      row.defined = false;
      row.p_value = kNan;
    }
    table.rows.push_back(row);
  }
  return table;
}

namespace {

struct RmLayout {
  std::vector<const Column*> factors;  // subject first, then within
  std::vector<int> dims;
  const Column* y = nullptr;
  std::size_t n = 0;
};

int cells_of(const RmLayout& lay, unsigned mask) {
  int c = 1;
  for (std::size_t i = 0; i < lay.dims.size(); ++i) {
    if (mask & (1u << i)) c *= lay.dims[i];
  }
  return c;
}

// Cell index of one row under a subset of the factors (mixed radix).
int cell_of_row(const RmLayout& lay, unsigned mask, std::size_t row) {
  int idx = 0;
  for (std::size_t i = 0; i < lay.factors.size(); ++i) {
    if (!(mask & (1u << i))) continue;
    idx = idx * lay.dims[i] + lay.factors[i]->codes[row];
  }
  return idx;
}

// Cell index under submask u of coordinates laid out for mask v.
int project_cell(const RmLayout& lay, unsigned v, unsigned u,
                 const std::vector<int>& coord) {
  int idx = 0;
  std::size_t at = 0;
  for (std::size_t i = 0; i < lay.factors.size(); ++i) {
    if (!(v & (1u << i))) continue;
    if (u & (1u << i)) idx = idx * lay.dims[i] + coord[at];
    ++at;
  }
  return idx;
}

}  // namespace

AnovaTable classical_rm_anova(const Dataset& ds, const std::string& dv,
                              const std::string& subject,
                              const std::vector<std::string>& within) {
  RmLayout lay;
  lay.n = ds.n_rows();
  lay.y = &ds.column(dv);
  if (lay.y->type != ColumnType::Numeric) {
    throw std::invalid_argument("response '" + dv + "' must be numeric");
  }
  std::vector<std::string> fnames;
  fnames.push_back(subject);
  fnames.insert(fnames.end(), within.begin(), within.end());
  for (const std::string& f : fnames) {
    const Column& c = ds.column(f);
    if (c.type != ColumnType::Factor) {
      throw std::invalid_argument("'" + f + "' must be a factor");
    }
    lay.factors.push_back(&c);
    lay.dims.push_back(static_cast<int>(c.levels.size()));
  }
  for (std::size_t r = 0; r < lay.n; ++r) {
    if (lay.y->missing[r]) {
      throw std::invalid_argument(
          "within-subjects ANOVA needs complete data; '" + dv +
          "' is missing in row " + std::to_string(r));
    }
    for (std::size_t f = 0; f < lay.factors.size(); ++f) {
      if (lay.factors[f]->missing[r]) {
        throw std::invalid_argument(
            "within-subjects ANOVA needs complete data; '" + fnames[f] +
            "' is missing in row " + std::to_string(r));
      }
    }
  }
  const int nsubj = lay.dims[0];
  if (nsubj < 2) {
    throw std::invalid_argument("within-subjects ANOVA needs at least 2 "
                                "subjects");
  }
  const unsigned full = (1u << lay.factors.size()) - 1u;
  const int total_cells = cells_of(lay, full);
  if (static_cast<int>(lay.n) != total_cells) {
    throw std::invalid_argument(
        "design is not balanced: " + std::to_string(lay.n) +
        " rows for " + std::to_string(total_cells) +
        " subject-by-cell combinations (each needed exactly once)");
  }
  {
    std::vector<int> counts(static_cast<std::size_t>(total_cells), 0);
    for (std::size_t r = 0; r < lay.n; ++r) {
      counts[static_cast<std::size_t>(cell_of_row(lay, full, r))]++;
    }
    for (int c : counts) {
      if (c != 1) {
        throw std::invalid_argument(
            "design is not balanced: a subject-by-cell combination is "
            "observed " + std::to_string(c) + " times instead of once");
      }
    }
  }

  // Cell means for every subset of the factors.
  std::vector<std::vector<double>> means(full + 1);
  for (unsigned m = 0; m <= full; ++m) {
    const int cells = cells_of(lay, m);
    means[m].assign(static_cast<std::size_t>(cells), 0.0);
    for (std::size_t r = 0; r < lay.n; ++r) {
      means[m][static_cast<std::size_t>(cell_of_row(lay, m, r))] +=
          lay.y->numeric[r];
    }
    const double per = double(lay.n) / double(cells);
    for (double& v : means[m]) v /= per;
  }

  // Balanced sum of squares for one effect by inclusion-exclusion over
  // its margins.
  auto effect_ss = [&](unsigned v) {
    const int cells = cells_of(lay, v);
    std::vector<int> coord(static_cast<std::size_t>(__builtin_popcount(v)));
    double ss = 0.0;
    for (int cell = 0; cell < cells; ++cell) {
      int rem = cell;
      for (int i = static_cast<int>(coord.size()) - 1; i >= 0; --i) {
        int at = 0, dim = 0;
        for (std::size_t f = 0; f < lay.factors.size(); ++f) {
          if (!(v & (1u << f))) continue;
          if (at == i) dim = lay.dims[f];
          ++at;
        }
        coord[static_cast<std::size_t>(i)] = rem % dim;
        rem /= dim;
      }
      double tau = 0.0;
      const int vbits = __builtin_popcount(v);
      for (unsigned u = v;; u = (u - 1) & v) {
        const double sign =
            ((vbits - __builtin_popcount(u)) % 2 == 0) ? 1.0 : -1.0;
        tau += sign * means[u][static_cast<std::size_t>(
                          project_cell(lay, v, u, coord))];
        if (u == 0) break;
      }
      ss += tau * tau;
    }
    return ss * double(lay.n) / double(cells);
  };

  AnovaTable table;
  table.source = AnovaSource::ClassicalRM;
  const std::size_t k = within.size();
  std::vector<unsigned> order;
  for (unsigned wm = 1; wm < (1u << k); ++wm) order.push_back(wm);
  std::sort(order.begin(), order.end(), [](unsigned a, unsigned b) {
    const int pa = __builtin_popcount(a), pb = __builtin_popcount(b);
    return pa != pb ? pa < pb : a < b;
  });

  for (unsigned wm : order) {
    const unsigned v = wm << 1;  // factor-space mask (bit 0 is subject)
    FTestRow row;
    int df1 = 1;
    for (std::size_t i = 0; i < k; ++i) {
      if (wm & (1u << i)) {
        row.term += (row.term.empty() ? "" : ":") + within[i];
        df1 *= lay.dims[i + 1] - 1;
      }
    }
    const double ss = effect_ss(v);
    const double sse = effect_ss(v | 1u);
    const int dfe = (nsubj - 1) * df1;
    row.df1 = df1;
    row.df2 = dfe;
    const double mse = sse / dfe;
    if (mse == 0.0) {
      row.defined = false;
      row.f_value = kNan;
      row.p_value = kNan;
    } else {
      row.f_value = (ss / df1) / mse;
      row.p_value = f_tail(row.f_value, double(df1), double(dfe));
    }
    table.rows.push_back(row);
  }
  return table;
}

namespace {

int count_params(const LmmFit& f) {
  return static_cast<int>(f.mats.p()) + static_cast<int>(f.mats.n_theta()) + 1;
}

int count_variance_params(const LmmFit& f) {
  int c = 0;
  for (const ThetaEntry& e : f.mats.theta_layout) c += e.diagonal() ? 1 : 0;
  return c;
}

std::set<std::string> fixed_signature(const LmmFit& f) {
  std::set<std::string> s(f.mats.x_names.begin(), f.mats.x_names.end());
  return s;
}

bool blocks_nested(const ModelMatrices& small, const ModelMatrices& big) {
  for (const ZBlock& sb : small.blocks) {
    bool found = false;
    for (const ZBlock& bb : big.blocks) {
      if (sb.grouping_name != bb.grouping_name) continue;
      bool subset = true;
      for (const std::string& c : sb.col_names) {
        if (std::find(bb.col_names.begin(), bb.col_names.end(), c) ==
            bb.col_names.end()) {
          subset = false;
          break;
        }
      }
      if (subset) {
        found = true;
        break;
      }
    }
    if (!found) return false;
  }
  return true;
}

}  // namespace

LrtResult compare_models(const LmmFit& a, const LmmFit& b) {
  if (a.method != b.method) {
    throw std::invalid_argument(
        "cannot compare fits estimated by different methods; refit both "
        "with the same one");
  }
  if (a.mats.y.size() != b.mats.y.size() ||
      (a.mats.y - b.mats.y).cwiseAbs().maxCoeff() != 0.0) {
    throw std::invalid_argument(
        "fits are not on the same response rows; refit on a common dataset");
  }

  const bool same_fixed = fixed_signature(a) == fixed_signature(b);
  if (a.method == FitMethod::REML && !same_fixed) {
    throw std::invalid_argument(
        "REML criteria of models with different fixed effects are not "
        "comparable (the restricted likelihoods live on different "
        "projections); refit both models with ML to compare them");
  }

  const int pa = count_params(a), pb = count_params(b);
  const LmmFit& null_f = pa <= pb ? a : b;
  const LmmFit& alt_f = pa <= pb ? b : a;
  const std::set<std::string> alt_fixed = fixed_signature(alt_f);
  const std::set<std::string> null_fixed = fixed_signature(null_f);
  const bool fixed_nested = std::includes(alt_fixed.begin(), alt_fixed.end(),
                                          null_fixed.begin(), null_fixed.end());
  if (!fixed_nested || !blocks_nested(null_f.mats, alt_f.mats)) {
    throw std::invalid_argument(
        "models are not nested; the likelihood-ratio test needs one "
        "model's terms to contain the other's");
  }

  LrtResult r;
  r.params_null = count_params(null_f);
  r.params_alt = count_params(alt_f);
  r.deviance_null = null_f.deviance;
  r.deviance_alt = alt_f.deviance;
  r.df = r.params_alt - r.params_null;
  r.chisq = std::max(0.0, r.deviance_null - r.deviance_alt);
  r.p_value = r.df > 0 ? chisq_tail(r.chisq, double(r.df)) : 1.0;
  r.boundary_caveat =
      count_variance_params(alt_f) > count_variance_params(null_f);
  return r;
}

namespace {

std::string fmt6(double v) {
  if (std::isnan(v)) return "undefined";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

std::string format_anova_text(const AnovaTable& table) {
  std::ostringstream out;
  out << (table.source == AnovaSource::MixedSatterthwaite
              ? "F tests with Satterthwaite denominator degrees of freedom\n"
              : "classical within-subjects ANOVA\n");
  char line[256];
  std::snprintf(line, sizeof(line), "%-24s %10s %6s %10s %12s\n", "term", "F",
                "df1", "df2", "p");
  out << line;
  for (const FTestRow& r : table.rows) {
    std::snprintf(line, sizeof(line), "%-24s %10s %6d %10s %12s\n",
                  r.term.c_str(), fmt6(r.f_value).c_str(), r.df1,
                  fmt6(r.df2).c_str(), fmt6(r.p_value).c_str());
    out << line;
  }
  for (const std::string& w : table.warnings) {
    out << "warning: " << w << "\n";
  }
  return out.str();
}

std::string anova_to_json(const AnovaTable& table) {
  nlohmann::json j;
  j["source"] = table.source == AnovaSource::MixedSatterthwaite
                    ? "mixed_satterthwaite"
                    : "classical_rm";
  j["df_fallback"] = table.df_fallback;
  j["warnings"] = table.warnings;
  nlohmann::json rows = nlohmann::json::array();
  for (const FTestRow& r : table.rows) {
    rows.push_back({{"term", r.term},
                    {"F", r.f_value},
                    {"df1", r.df1},
                    {"df2", r.df2},
                    {"p", r.p_value},
                    {"defined", r.defined}});
  }
  j["rows"] = rows;
  return j.dump(2);
}

std::string format_lrt_text(const LrtResult& r) {
  std::ostringstream out;
  out << "likelihood-ratio comparison\n";
  out << "  deviance " << fmt6(r.deviance_null) << " ("
      << r.params_null << " params) vs " << fmt6(r.deviance_alt) << " ("
      << r.params_alt << " params)\n";
  out << "  chisq = " << fmt6(r.chisq) << ", df = " << r.df
      << ", p = " << fmt6(r.p_value) << "\n";
  if (r.boundary_caveat) {
    out << "  note: the added parameters include a variance whose null "
           "value sits on the boundary; the p-value is conservative\n";
  }
  return out.str();
}

std::string lrt_to_json(const LrtResult& r) {
  nlohmann::json j;
  j["chisq"] = r.chisq;
  j["df"] = r.df;
  j["p"] = r.p_value;
  j["deviance_null"] = r.deviance_null;
  j["deviance_alt"] = r.deviance_alt;
  j["params_null"] = r.params_null;
  j["params_alt"] = r.params_alt;
  j["boundary_caveat"] = r.boundary_caveat;
  return j.dump(2);
}

}  // namespace lmmkit
