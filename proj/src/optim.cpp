#include "lmmkit/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace lmmkit {

namespace {

Eigen::VectorXd clamp(const Eigen::VectorXd& x, const Eigen::VectorXd& lo,
                      const Eigen::VectorXd& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

}  // namespace

OptimResult nelder_mead_bounded(const ObjectiveFn& f,
                                const Eigen::VectorXd& x0,
                                const Eigen::VectorXd& lower,
                                const Eigen::VectorXd& upper,
                                const OptimOptions& opts) {
  const int d = static_cast<int>(x0.size());
  OptimResult res;
  int evals = 0;
  auto eval = [&](const Eigen::VectorXd& x) {
    ++evals;
    return f(x);
  };

  std::vector<Eigen::VectorXd> pts;
  std::vector<double> vals;
  Eigen::VectorXd start = clamp(x0, lower, upper);
  pts.push_back(start);
  vals.push_back(eval(start));
  for (int i = 0; i < d; ++i) {
    Eigen::VectorXd v = start;
    const double step =
        opts.initial_step * std::max(1.0, std::abs(start[i]));
    v[i] += step;
    v = clamp(v, lower, upper);
    if ((v - start).norm() == 0.0) {
      // Bound swallowed the step; try the other direction.
      v[i] = start[i] - step;
      v = clamp(v, lower, upper);
    }
    pts.push_back(v);
    vals.push_back(eval(v));
  }

  std::vector<int> order(pts.size());
  auto sort_simplex = [&] {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return vals[a] < vals[b]; });
  };

  const double alpha = 1.0, gamma = 2.0, rho = 0.5, sigma = 0.5;
  bool converged = false;
  while (evals < opts.max_evals) {
    sort_simplex();
    const int best = order[0];
    const int worst = order[d];
    const int second = order[d - 1];
    const double spread = vals[worst] - vals[best];
    if (spread <= opts.rel_tol * (std::abs(vals[best]) + opts.rel_tol)) {
      converged = true;
      break;
    }

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(d);
    for (int i = 0; i <= d; ++i) {
      if (i != worst) centroid += pts[static_cast<std::size_t>(i)];
    }
    centroid /= d;

    Eigen::VectorXd xr =
        clamp(centroid + alpha * (centroid - pts[worst]), lower, upper);
    const double fr = eval(xr);
    if (fr < vals[best]) {
      Eigen::VectorXd xe =
          clamp(centroid + gamma * (xr - centroid), lower, upper);
      const double fe = eval(xe);
      if (fe < fr) {
        pts[worst] = xe;
        vals[worst] = fe;
      } else {
        pts[worst] = xr;
        vals[worst] = fr;
      }
      continue;
    }
    if (fr < vals[second]) {
      pts[worst] = xr;
      vals[worst] = fr;
      continue;
    }
    // Contraction, outside or inside of the worst point.
    Eigen::VectorXd xc;
    double fc;
    if (fr < vals[worst]) {
      xc = clamp(centroid + rho * (xr - centroid), lower, upper);
      fc = eval(xc);
      if (fc <= fr) {
        pts[worst] = xc;
        vals[worst] = fc;
        continue;
      }
    } else {
      xc = clamp(centroid - rho * (centroid - pts[worst]), lower, upper);
      fc = eval(xc);
      if (fc < vals[worst]) {
        pts[worst] = xc;
        vals[worst] = fc;
        continue;
      }
    }
    // Shrink toward the best vertex.
    for (int i = 0; i <= d; ++i) {
      if (i == best) continue;
      pts[i] = clamp(pts[best] + sigma * (pts[i] - pts[best]), lower, upper);
      vals[i] = eval(pts[i]);
      if (evals >= opts.max_evals) break;
    }
  }

  sort_simplex();
  res.x = pts[order[0]];
  res.value = vals[order[0]];
  res.evaluations = evals;
  res.converged = converged;
  return res;
}

OptimResult newton_polish(const ObjectiveFn& f, const Eigen::VectorXd& x0,
                          const Eigen::VectorXd& lower,
                          const Eigen::VectorXd& upper,
                          const OptimOptions& opts) {
  const int d = static_cast<int>(x0.size());
  OptimResult res;
  int evals = 0;
  auto eval = [&](const Eigen::VectorXd& x) {
    ++evals;
    return f(x);
  };

  Eigen::VectorXd x = clamp(x0, lower, upper);
  double fx = eval(x);
  const double bound_eps = 1e-10;

  for (int iter = 0; iter < opts.polish_iters; ++iter) {
    // Central-difference gradient and Hessian.
    Eigen::VectorXd h(d);
    for (int i = 0; i < d; ++i) h[i] = 1e-5 * std::max(1.0, std::abs(x[i]));

    Eigen::VectorXd g(d);
    std::vector<double> fplus(static_cast<std::size_t>(d));
    std::vector<double> fminus(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
      Eigen::VectorXd xp = x, xm = x;
      xp[i] += h[i];
      xm[i] -= h[i];
      fplus[static_cast<std::size_t>(i)] = eval(xp);
      fminus[static_cast<std::size_t>(i)] = eval(xm);
      g[i] = (fplus[static_cast<std::size_t>(i)] -
              fminus[static_cast<std::size_t>(i)]) /
             (2.0 * h[i]);
    }

    // Active set: pinned at a bound with the gradient pushing outward.
    std::vector<int> free;
    for (int i = 0; i < d; ++i) {
      const bool at_lo = x[i] <= lower[i] + bound_eps && g[i] > 0.0;
      const bool at_hi = x[i] >= upper[i] - bound_eps && g[i] < 0.0;
      if (!at_lo && !at_hi) free.push_back(i);
    }
    if (free.empty()) break;
    const int m = static_cast<int>(free.size());

    Eigen::MatrixXd H(m, m);
    for (int a = 0; a < m; ++a) {
      const int i = free[static_cast<std::size_t>(a)];
      H(a, a) = (fplus[static_cast<std::size_t>(i)] - 2.0 * fx +
                 fminus[static_cast<std::size_t>(i)]) /
                (h[i] * h[i]);
      for (int b = a + 1; b < m; ++b) {
        const int j = free[static_cast<std::size_t>(b)];
        Eigen::VectorXd xpp = x, xpm = x, xmp = x, xmm = x;
        xpp[i] += h[i]; xpp[j] += h[j];
        xpm[i] += h[i]; xpm[j] -= h[j];
        xmp[i] -= h[i]; xmp[j] += h[j];
        xmm[i] -= h[i]; xmm[j] -= h[j];
        const double v =
            (eval(xpp) - eval(xpm) - eval(xmp) + eval(xmm)) /
            (4.0 * h[i] * h[j]);
        H(a, b) = v;
        H(b, a) = v;
      }
    }

    Eigen::VectorXd gf(m);
    for (int a = 0; a < m; ++a) gf[a] = g[free[static_cast<std::size_t>(a)]];

    // Ridge-shift until positive definite.
    double ridge = 0.0;
    Eigen::LLT<Eigen::MatrixXd> llt;
    for (int attempt = 0; attempt < 60; ++attempt) {
      Eigen::MatrixXd Hs = H;
      if (ridge > 0.0) {
        Hs += ridge * Eigen::MatrixXd::Identity(m, m);
      }
      llt.compute(Hs);
      if (llt.info() == Eigen::Success) break;
      ridge = ridge == 0.0 ? 1e-8 * (1.0 + H.diagonal().cwiseAbs().maxCoeff())
                           : ridge * 10.0;
    }
    if (llt.info() != Eigen::Success) break;
    Eigen::VectorXd step_f = llt.solve(-gf);

    Eigen::VectorXd step = Eigen::VectorXd::Zero(d);
    for (int a = 0; a < m; ++a) step[free[static_cast<std::size_t>(a)]] = step_f[a];

    // Backtracking acceptance.
    double t = 1.0;
    bool accepted = false;
    for (int bt = 0; bt < 12; ++bt) {
      Eigen::VectorXd xn = clamp(x + t * step, lower, upper);
      const double fn = eval(xn);
      if (fn < fx) {
        const double drop = fx - fn;
        x = xn;
        fx = fn;
        accepted = true;
        if (drop <= 1e-13 * (1.0 + std::abs(fx))) iter = opts.polish_iters;
        break;
      }
      t *= 0.5;
      if (evals >= opts.max_evals) break;
    }
    if (!accepted) break;
    if (evals >= opts.max_evals) break;
  }

  res.x = x;
  res.value = fx;
  res.evaluations = evals;
  res.converged = true;
  return res;
}

OptimResult minimize_bounded(const ObjectiveFn& f, const Eigen::VectorXd& x0,
                             const Eigen::VectorXd& lower,
                             const Eigen::VectorXd& upper,
                             const OptimOptions& opts) {
  OptimResult nm = nelder_mead_bounded(f, x0, lower, upper, opts);
  OptimOptions popts = opts;
  popts.max_evals = std::max(1000, opts.max_evals - nm.evaluations);
  OptimResult pol = newton_polish(f, nm.x, lower, upper, popts);
  pol.evaluations += nm.evaluations;
  pol.converged = nm.converged || pol.value < nm.value;
  if (pol.value <= nm.value) return pol;
  nm.evaluations = pol.evaluations;
  return nm;
}

}  // namespace lmmkit
