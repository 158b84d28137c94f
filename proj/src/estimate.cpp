#include "lmmkit/estimate.hpp"

#include <json.hpp>

#include "lmmkit/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <utility>

namespace lmmkit {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Smallest admissible residual variance. Relative to the response spread,
// with a second anchor on the response magnitude: a constant response has
// zero spread, yet the penalized residual still carries rounding noise on
// the order of eps^2 * |y|^2, and the floor must sit above that noise for
// the deviance to stay flat where the data are exactly fit.
double sigma2_floor(double var_y, double meansq_y) {
  return std::max({1e-10 * var_y, 1e-12 * meansq_y,
                   std::numeric_limits<double>::min()});
}

std::string describe_groupings(const ModelMatrices& mats) {
  std::string out;
  for (const ZBlock& b : mats.blocks) {
    if (!out.empty()) out += ", ";
    out += b.grouping_name;
  }
  return out;
}

// Dense per-term relative factor from the packed parameter vector.
Eigen::MatrixXd term_lambda(const ModelMatrices& mats,
                            const Eigen::VectorXd& theta, int term) {
  const int k = mats.blocks[static_cast<std::size_t>(term)].k;
  Eigen::MatrixXd lam = Eigen::MatrixXd::Zero(k, k);
  for (std::size_t i = 0; i < mats.theta_layout.size(); ++i) {
    const ThetaEntry& e = mats.theta_layout[i];
    if (e.term == term) lam(e.row, e.col) = theta[static_cast<Eigen::Index>(i)];
  }
  return lam;
}

}  // namespace

PlsContext::PlsContext(const ModelMatrices& mats) : mats_(&mats) {
  n_ = static_cast<int>(mats.n);
  p_ = static_cast<int>(mats.p());
  q_ = static_cast<int>(count_random_effects(mats));

  const Eigen::VectorXd& y = mats.y;
  yty_ = y.squaredNorm();
  const double mean_y = y.size() > 0 ? y.mean() : 0.0;
  var_y_ = y.size() > 1
               ? (y.array() - mean_y).square().sum() / double(y.size() - 1)
               : 0.0;
  meansq_y_ = y.size() > 0 ? yty_ / double(y.size()) : 0.0;

  xtx_ = mats.X.transpose() * mats.X;
  xty_ = mats.X.transpose() * y;

  if (q_ == 0) return;

  // All blocks side by side; column offsets follow block order.
  z_.resize(n_, q_);
  std::vector<Eigen::Triplet<double>> trips;
  int off = 0;
  for (const ZBlock& b : mats.blocks) {
    for (int outer = 0; outer < b.Z.outerSize(); ++outer) {
      for (Eigen::SparseMatrix<double>::InnerIterator it(b.Z, outer); it;
           ++it) {
        trips.emplace_back(static_cast<int>(it.row()),
                           off + static_cast<int>(it.col()), it.value());
      }
    }
    off += b.n_coefs();
  }
  z_.setFromTriplets(trips.begin(), trips.end());

  ztz_ = (z_.transpose() * z_).eval();
  ztx_ = z_.transpose() * mats.X;
  zty_ = z_.transpose() * y;

  // The fill-reducing permutation is chosen once, on a reference system
  // whose sparsity pattern every later evaluation reproduces exactly:
  // the factor keeps explicit entries in all parameter slots, so the
  // pattern of Lambda' Z'Z Lambda + I never depends on the values.
  Eigen::VectorXd ref(static_cast<Eigen::Index>(mats.n_theta()));
  for (std::size_t i = 0; i < mats.n_theta(); ++i) {
    ref[static_cast<Eigen::Index>(i)] =
        mats.theta_layout[i].diagonal() ? 1.0 : 0.5;
  }
  Eigen::SparseMatrix<double> lam = lambda(ref);
  Eigen::SparseMatrix<double> ident(q_, q_);
  ident.setIdentity();
  Eigen::SparseMatrix<double> a =
      Eigen::SparseMatrix<double>(lam.transpose() * ztz_ * lam) + ident;
  llt_.analyzePattern(a);
}

Eigen::SparseMatrix<double> PlsContext::lambda(
    const Eigen::VectorXd& theta) const {
  const ModelMatrices& mats = *mats_;
  Eigen::SparseMatrix<double> lam(q_, q_);
  std::vector<Eigen::Triplet<double>> trips;
  int off = 0;
  for (std::size_t b = 0; b < mats.blocks.size(); ++b) {
    const ZBlock& blk = mats.blocks[b];
    const Eigen::MatrixXd tl = term_lambda(mats, theta, static_cast<int>(b));
    for (int lev = 0; lev < blk.n_levels(); ++lev) {
      const int base = off + lev * blk.k;
      for (int c = 0; c < blk.k; ++c) {
        trips.emplace_back(base + c, base + c, tl(c, c));
        if (!blk.correlated) continue;
        for (int r = c + 1; r < blk.k; ++r) {
          trips.emplace_back(base + r, base + c, tl(r, c));
        }
      }
    }
    off += blk.n_coefs();
  }
  lam.setFromTriplets(trips.begin(), trips.end());
  return lam;
}

PlsContext::Solution PlsContext::solve(const Eigen::VectorXd& theta) {
  if (theta.size() != static_cast<Eigen::Index>(mats_->n_theta())) {
    throw std::invalid_argument("parameter vector does not match the layout");
  }
  Solution s;

  if (q_ == 0) {
    Eigen::LLT<Eigen::MatrixXd> lx(xtx_);
    if (lx.info() != Eigen::Success) {
      throw std::runtime_error("fixed-effects system is not positive definite");
    }
    s.beta = lx.solve(xty_);
    s.u.resize(0);
    s.gamma.resize(0);
    const Eigen::VectorXd resid = mats_->y - mats_->X * s.beta;
    s.pwrss = resid.squaredNorm();
    s.ldL2 = 0.0;
    s.ldRX2 = 2.0 * Eigen::MatrixXd(lx.matrixL())
                        .diagonal()
                        .array()
                        .log()
                        .sum();
    s.unscaled_vcov = lx.solve(Eigen::MatrixXd::Identity(p_, p_));
    return s;
  }

  const Eigen::SparseMatrix<double> lam = lambda(theta);
  Eigen::SparseMatrix<double> ident(q_, q_);
  ident.setIdentity();
  const Eigen::SparseMatrix<double> a =
      Eigen::SparseMatrix<double>(lam.transpose() * ztz_ * lam) + ident;
  llt_.factorize(a);
  if (llt_.info() != Eigen::Success) {
    throw std::runtime_error(
        "failed to factorize the penalized random-effects system (" +
        describe_groupings(*mats_) + ")");
  }

  const auto& perm = llt_.permutationP();
  const Eigen::VectorXd cu = llt_.matrixL().solve(perm * (lam.transpose() * zty_).eval());
  const Eigen::MatrixXd rzx =
      llt_.matrixL().solve(perm * (lam.transpose() * ztx_).eval());

  const Eigen::MatrixXd xtxdot = xtx_ - rzx.transpose() * rzx;
  Eigen::LLT<Eigen::MatrixXd> lx(xtxdot);
  if (lx.info() != Eigen::Success) {
    throw std::runtime_error(
        "failed to factorize the profiled fixed-effects system");
  }
  const Eigen::VectorXd cbeta =
      lx.matrixL().solve(xty_ - rzx.transpose() * cu);
  s.beta = lx.matrixU().solve(cbeta);

  const Eigen::VectorXd pu = llt_.matrixU().solve(cu - rzx * s.beta);
  s.u = llt_.permutationPinv() * pu;
  s.gamma = lam * s.u;

  const Eigen::VectorXd resid =
      mats_->y - mats_->X * s.beta - z_ * s.gamma;
  s.pwrss = resid.squaredNorm() + s.u.squaredNorm();

  const Eigen::SparseMatrix<double> lfac = llt_.matrixL();
  s.ldL2 = 2.0 * lfac.diagonal().array().log().sum();
  s.ldRX2 =
      2.0 * Eigen::MatrixXd(lx.matrixL()).diagonal().array().log().sum();
  s.unscaled_vcov = lx.solve(Eigen::MatrixXd::Identity(p_, p_));
  return s;
}

double PlsContext::profiled_deviance(const Eigen::VectorXd& theta,
                                     FitMethod method) {
  const Solution s = solve(theta);
  const double floor = sigma2_floor(var_y_, meansq_y_);
  if (method == FitMethod::ML) {
    const double sigma2 = std::max(s.pwrss / n_, floor);
    return s.ldL2 + n_ * (1.0 + std::log(kTwoPi * sigma2));
  }
  const double dof = double(n_ - p_);
  const double sigma2 = std::max(s.pwrss / dof, floor);
  return s.ldL2 + s.ldRX2 + dof * (1.0 + std::log(kTwoPi * sigma2));
}

double PlsContext::deviance_at(const Eigen::VectorXd& theta, double log_sigma,
                               FitMethod method) {
  const Solution s = solve(theta);
  const double sigma2 = std::exp(2.0 * log_sigma);
  double dev = s.ldL2 + s.pwrss / sigma2 + n_ * std::log(kTwoPi * sigma2);
  if (method == FitMethod::REML) {
    dev += s.ldRX2 - p_ * std::log(kTwoPi * sigma2);
  }
  return dev;
}

double profiled_deviance(const ModelMatrices& mats,
                         const Eigen::VectorXd& theta, FitMethod method) {
  PlsContext ctx(mats);
  return ctx.profiled_deviance(theta, method);
}

namespace {

std::vector<VarianceComponent> build_components(const ModelMatrices& mats,
                                                const Eigen::VectorXd& theta,
                                                double sigma2) {
  std::vector<VarianceComponent> out;
  for (std::size_t b = 0; b < mats.blocks.size(); ++b) {
    const ZBlock& blk = mats.blocks[b];
    VarianceComponent vc;
    vc.grouping = blk.grouping_name;
    vc.names = blk.col_names;
    vc.correlated = blk.correlated;
    vc.lambda = term_lambda(mats, theta, static_cast<int>(b));
    vc.covariance = sigma2 * vc.lambda * vc.lambda.transpose();
    vc.stddev = vc.covariance.diagonal().array().max(0.0).sqrt();
    const int k = blk.k;
    vc.correlation = Eigen::MatrixXd::Zero(k, k);
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        const double denom = vc.stddev[i] * vc.stddev[j];
        if (denom > 0.0) vc.correlation(i, j) = vc.covariance(i, j) / denom;
      }
    }
    out.push_back(std::move(vc));
  }
  return out;
}

SingularReport detect_singular(const std::vector<VarianceComponent>& comps,
                               double tol) {
  SingularReport rep;
  double dmax = 0.0;
  for (const VarianceComponent& vc : comps) {
    dmax = std::max(dmax, vc.lambda.diagonal().maxCoeff());
  }
  const double thresh = tol * std::max(1.0, dmax);
  for (const VarianceComponent& vc : comps) {
    const int k = static_cast<int>(vc.names.size());
    for (int i = 0; i < k; ++i) {
      if (vc.lambda(i, i) < thresh) {
        rep.components.push_back({vc.grouping, vc.names[i]});
      }
    }
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < i; ++j) {
        if (std::abs(vc.correlation(i, j)) > 1.0 - tol) {
          rep.components.push_back(
              {vc.grouping, "corr(" + vc.names[j] + ", " + vc.names[i] + ")"});
        }
      }
    }
  }
  rep.singular = !rep.components.empty();
  return rep;
}

}  // namespace

LmmFit fit_lmm(const ModelMatrices& mats, const FitOptions& opts) {
  const int n = static_cast<int>(mats.n);
  for (const ZBlock& blk : mats.blocks) {
    if (blk.n_coefs() >= n) {
      throw std::invalid_argument(
          "random-effects term for grouping '" + blk.grouping_name +
          "' carries " + std::to_string(blk.n_coefs()) + " coefficients (" +
          std::to_string(blk.k) + " per level x " +
          std::to_string(blk.n_levels()) + " levels) with only " +
          std::to_string(n) +
          " observations; its random-effects parameters and the residual "
          "variance are probably unidentifiable. Collect replicates or "
          "simplify the term.");
    }
  }
  if (n <= static_cast<int>(mats.p())) {
    throw std::invalid_argument(
        "model has " + std::to_string(mats.p()) + " fixed-effect columns for " +
        std::to_string(n) + " observations");
  }
  if (!(opts.rel_tol > 0.0) || opts.max_evals < 1) {
    throw std::invalid_argument("invalid fit options");
  }

  PlsContext ctx(mats);
  const Eigen::Index nt = static_cast<Eigen::Index>(mats.n_theta());

  Eigen::VectorXd x0(nt), lo(nt), hi(nt);
  for (Eigen::Index i = 0; i < nt; ++i) {
    const bool diag = mats.theta_layout[static_cast<std::size_t>(i)].diagonal();
    x0[i] = diag ? 0.5 : 0.0;
    lo[i] = diag ? 0.0 : -std::numeric_limits<double>::infinity();
    hi[i] = std::numeric_limits<double>::infinity();
  }

  OptimResult best;
  if (nt == 0) {
    best.x = x0;
    best.value = ctx.profiled_deviance(x0, opts.method);
    best.evaluations = 1;
    best.converged = true;
  } else {
    OptimOptions oo;
    oo.rel_tol = opts.rel_tol;
    oo.max_evals = opts.max_evals;
    oo.initial_step = 0.5;
    auto obj = [&ctx, &opts](const Eigen::VectorXd& th) {
      return ctx.profiled_deviance(th, opts.method);
    };
    best = minimize_bounded(obj, x0, lo, hi, oo);
    if (!best.converged) {
      throw ConvergenceError(
          "deviance optimization did not converge within " +
              std::to_string(opts.max_evals) + " evaluations",
          best.x, best.value, best.evaluations);
    }

    // A diagonal entry resting on its zero bound can be a zero-gradient
    // ridge rather than a minimum: the deviance is even in a lone diagonal
    // entry (flipping that Lambda column's sign changes nothing), so both
    // the simplex spread and a symmetric gradient read as converged there
    // even when a narrow interior optimum exists. Probe outward at several
    // scales and reoptimize from any improving point.
    int total_evals = best.evaluations;
    for (int round = 0; round < 3; ++round) {
      bool improved = false;
      for (Eigen::Index i = 0; i < nt && !improved; ++i) {
        if (!mats.theta_layout[static_cast<std::size_t>(i)].diagonal())
          continue;
        if (best.x[i] > 1e-6) continue;
        for (double probe : {0.01, 0.03, 0.1, 0.3, 1.0}) {
          Eigen::VectorXd th = best.x;
          th[i] = probe;
          const double f = obj(th);
          ++total_evals;
          if (f < best.value - 1e-7) {
            OptimOptions again = oo;
            again.initial_step = std::max(0.5 * probe, 0.05);
            OptimResult r = minimize_bounded(obj, th, lo, hi, again);
            total_evals += r.evaluations;
            if (r.converged && r.value < best.value) {
              r.evaluations = total_evals;
              best = r;
              improved = true;
            }
            break;
          }
        }
      }
      if (!improved) break;
    }
    best.evaluations = total_evals;
  }

  const PlsContext::Solution sol = ctx.solve(best.x);
  const double dof =
      opts.method == FitMethod::REML ? double(n - ctx.p()) : double(n);
  const double sigma2 =
      std::max(sol.pwrss / dof, sigma2_floor(ctx.var_y(), ctx.meansq_y()));

  LmmFit fit;
  fit.mats = mats;
  fit.method = opts.method;
  fit.options = opts;
  fit.theta = best.x;
  fit.beta = sol.beta;
  fit.vcov_beta = sigma2 * sol.unscaled_vcov;
  fit.sigma2 = sigma2;
  fit.deviance = best.value;
  fit.components = build_components(mats, best.x, sigma2);
  fit.u = sol.u;
  fit.gamma = sol.gamma;
  if (ctx.q() > 0) {
    fit.fitted = mats.X * sol.beta + ctx.Z() * sol.gamma;
  } else {
    fit.fitted = mats.X * sol.beta;
  }
  fit.residuals = mats.y - fit.fitted;

  int off = 0;
  for (const ZBlock& blk : mats.blocks) {
    Eigen::MatrixXd vals(blk.n_levels(), blk.k);
    for (int lev = 0; lev < blk.n_levels(); ++lev) {
      for (int j = 0; j < blk.k; ++j) {
        vals(lev, j) = fit.gamma[off + lev * blk.k + j];
      }
    }
    fit.ranef_values.push_back(std::move(vals));
    off += blk.n_coefs();
  }

  fit.converged = best.converged;
  fit.evaluations = best.evaluations;
  const SingularReport rep = detect_singular(fit.components, opts.singular_tol);
  fit.singular = rep.singular;
  fit.singular_components = rep.components;
  return fit;
}

std::vector<RanefRow> ranef(const LmmFit& fit) {
  std::vector<RanefRow> rows;
  for (std::size_t b = 0; b < fit.mats.blocks.size(); ++b) {
    const ZBlock& blk = fit.mats.blocks[b];
    const Eigen::MatrixXd& vals = fit.ranef_values[b];
    for (int lev = 0; lev < blk.n_levels(); ++lev) {
      for (int j = 0; j < blk.k; ++j) {
        rows.push_back({blk.grouping_name, blk.levels[static_cast<std::size_t>(
                                               lev)],
                        blk.col_names[static_cast<std::size_t>(j)],
                        vals(lev, j)});
      }
    }
  }
  return rows;
}

Eigen::VectorXd predict(const LmmFit& fit, const Dataset& ds,
                        bool include_random) {
  const Eigen::MatrixXd xn = encode_fixed_rows(fit.mats, ds);
  Eigen::VectorXd pred = xn * fit.beta;
  if (!include_random) return pred;
  for (std::size_t b = 0; b < fit.mats.blocks.size(); ++b) {
    const ZBlock& blk = fit.mats.blocks[b];
    const std::vector<std::int32_t> lev =
        encode_grouping_rows(fit.mats, b, ds);
    const Eigen::MatrixXd inner = encode_inner_rows(fit.mats, b, ds);
    for (Eigen::Index r = 0; r < pred.size(); ++r) {
      const std::int32_t li = lev[static_cast<std::size_t>(r)];
      if (li < 0) {
        throw std::invalid_argument(
            "row " + std::to_string(r) + " has a level of '" +
            blk.grouping_name +
            "' unseen at fit time; random-effect deviates exist only for "
            "fitted levels (predict without random effects instead)");
      }
      pred[r] += inner.row(r).dot(fit.ranef_values[b].row(li));
    }
  }
  return pred;
}

SingularReport is_singular(const LmmFit& fit, double tol) {
  return detect_singular(fit.components, tol);
}

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

std::string summarize_fit(const LmmFit& fit) {
  std::ostringstream out;
  out << "linear mixed model fit by "
      << (fit.method == FitMethod::REML ? "REML" : "ML") << "\n";
  out << (fit.method == FitMethod::REML ? "REML criterion" : "deviance")
      << ": " << fmt6(fit.deviance) << "\n\n";

  out << "random effects:\n";
  char line[256];
  std::snprintf(line, sizeof(line), "  %-22s %-16s %-10s %-10s %s\n", "group",
                "name", "variance", "std.dev.", "corr");
  out << line;
  for (const VarianceComponent& vc : fit.components) {
    const int k = static_cast<int>(vc.names.size());
    for (int i = 0; i < k; ++i) {
      std::string corr;
      for (int j = 0; j < i; ++j) {
        corr += (j ? " " : "") + fmt6(vc.correlation(i, j));
      }
      std::snprintf(line, sizeof(line), "  %-22s %-16s %-10s %-10s %s\n",
                    i == 0 ? vc.grouping.c_str() : "", vc.names[static_cast<std::size_t>(i)].c_str(),
                    fmt6(vc.covariance(i, i)).c_str(),
                    fmt6(vc.stddev[i]).c_str(), corr.c_str());
      out << line;
    }
  }
  std::snprintf(line, sizeof(line), "  %-22s %-16s %-10s %-10s\n", "residual",
                "", fmt6(fit.sigma2).c_str(), fmt6(std::sqrt(fit.sigma2)).c_str());
  out << line;

  out << "\nfixed effects:\n";
  std::snprintf(line, sizeof(line), "  %-24s %-12s %s\n", "name", "estimate",
                "std.error");
  out << line;
  for (std::size_t i = 0; i < fit.mats.x_names.size(); ++i) {
    const double se =
        std::sqrt(std::max(0.0, fit.vcov_beta(static_cast<Eigen::Index>(i),
                                              static_cast<Eigen::Index>(i))));
    std::snprintf(line, sizeof(line), "  %-24s %-12s %s\n",
                  fit.mats.x_names[i].c_str(),
                  fmt6(fit.beta[static_cast<Eigen::Index>(i)]).c_str(),
                  fmt6(se).c_str());
    out << line;
  }

  out << "\nconverged: " << (fit.converged ? "yes" : "no") << " ("
      << fit.evaluations << " evaluations)\n";
  if (fit.singular) {
    out << "boundary (singular) fit:";
    for (const SingularComponent& sc : fit.singular_components) {
      out << " [" << sc.grouping << ": " << sc.component << "]";
    }
    out << "\n";
  }
  return out.str();
}

std::string fit_to_json(const LmmFit& fit) {
  nlohmann::json j;
  j["method"] = fit.method == FitMethod::REML ? "REML" : "ML";
  j["deviance"] = fit.deviance;
  j["converged"] = fit.converged;
  j["evaluations"] = fit.evaluations;
  j["singular"] = fit.singular;
  j["n"] = fit.mats.n;
  j["p"] = fit.mats.p();
  j["sigma2"] = fit.sigma2;

  nlohmann::json fixed = nlohmann::json::array();
  for (std::size_t i = 0; i < fit.mats.x_names.size(); ++i) {
    const Eigen::Index ii = static_cast<Eigen::Index>(i);
    fixed.push_back({{"name", fit.mats.x_names[i]},
                     {"estimate", fit.beta[ii]},
                     {"std_error", std::sqrt(std::max(0.0, fit.vcov_beta(ii, ii)))}});
  }
  j["fixed"] = fixed;

  nlohmann::json rand = nlohmann::json::array();
  for (const VarianceComponent& vc : fit.components) {
    nlohmann::json rows = nlohmann::json::array();
    const int k = static_cast<int>(vc.names.size());
    for (int i = 0; i < k; ++i) {
      nlohmann::json row = {{"name", vc.names[static_cast<std::size_t>(i)]},
                            {"variance", vc.covariance(i, i)},
                            {"std_dev", vc.stddev[i]}};
      nlohmann::json corr = nlohmann::json::array();
      for (int jj = 0; jj < i; ++jj) corr.push_back(vc.correlation(i, jj));
      row["corr"] = corr;
      rows.push_back(row);
    }
    rand.push_back({{"group", vc.grouping},
                    {"correlated", vc.correlated},
                    {"terms", rows}});
  }
  rand.push_back({{"group", "residual"},
                  {"terms", nlohmann::json::array(
                                {{{"name", ""},
                                  {"variance", fit.sigma2},
                                  {"std_dev", std::sqrt(fit.sigma2)}}})}});
  j["random"] = rand;

  nlohmann::json sing = nlohmann::json::array();
  for (const SingularComponent& sc : fit.singular_components) {
    sing.push_back({{"group", sc.grouping}, {"component", sc.component}});
  }
  j["singular_components"] = sing;
  return j.dump(2);
}

}  // namespace lmmkit
