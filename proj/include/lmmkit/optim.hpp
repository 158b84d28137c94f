#pragma once

#include <Eigen/Dense>

#include <functional>

namespace lmmkit {

using ObjectiveFn = std::function<double(const Eigen::VectorXd&)>;

struct OptimResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int evaluations = 0;
  bool converged = false;
};

struct OptimOptions {
  double rel_tol = 1e-9;
  int max_evals = 10000;
  double initial_step = 1.0;    // Nelder-Mead simplex edge
  int polish_iters = 30;        // Newton refinement budget
};

// Nelder-Mead simplex with candidate points projected onto the box
// [lower, upper]. Deterministic; stops when the simplex's relative spread
// in function value drops below rel_tol or the evaluation budget runs out.
OptimResult nelder_mead_bounded(const ObjectiveFn& f,
                                const Eigen::VectorXd& x0,
                                const Eigen::VectorXd& lower,
                                const Eigen::VectorXd& upper,
                                const OptimOptions& opts = {});

// Finite-difference Newton refinement with simple active-set handling of
// the box: coordinates pinned at a bound with the gradient pushing outward
// are frozen. Assumes f is smooth in a neighborhood (evaluations may probe
// slightly outside the box). Indefinite Hessians are ridge-shifted.
OptimResult newton_polish(const ObjectiveFn& f, const Eigen::VectorXd& x0,
                          const Eigen::VectorXd& lower,
                          const Eigen::VectorXd& upper,
                          const OptimOptions& opts = {});

// Nelder-Mead followed by the Newton polish; returns the better point.
OptimResult minimize_bounded(const ObjectiveFn& f, const Eigen::VectorXd& x0,
                             const Eigen::VectorXd& lower,
                             const Eigen::VectorXd& upper,
                             const OptimOptions& opts = {});

}  // namespace lmmkit
