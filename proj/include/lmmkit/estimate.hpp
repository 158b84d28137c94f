#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <stdexcept>
#include <string>
#include <vector>

#include "lmmkit/design.hpp"

namespace lmmkit {

enum class FitMethod { ML, REML };

struct FitOptions {
  FitMethod method = FitMethod::REML;
  int max_evals = 10000;       // deviance evaluation budget
  double rel_tol = 1e-9;       // relative deviance convergence tolerance
  double singular_tol = 1e-4;  // boundary detection threshold
};

// Thrown when the optimizer exhausts its budget; carries the best state
// seen so the caller can inspect how far it got.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& msg, Eigen::VectorXd theta,
                   double deviance, int evaluations)
      : std::runtime_error(msg),
        best_theta(std::move(theta)),
        best_deviance(deviance),
        evaluations(evaluations) {}

  Eigen::VectorXd best_theta;
  double best_deviance;
  int evaluations;
};

// Penalized least squares engine. Everything that does not depend on the
// covariance parameters (Z'Z, Z'X, Z'y, X'X, X'y, y'y) is computed once;
// each evaluation rebuilds only the q x q penalized system and refactorizes
// it with a fill-reducing permutation chosen once up front (the sparsity
// pattern is independent of the parameter values by construction).
class PlsContext {
 public:
  explicit PlsContext(const ModelMatrices& mats);

  struct Solution {
    Eigen::VectorXd beta;
    Eigen::VectorXd u;      // spherical random effects
    Eigen::VectorXd gamma;  // conditional modes, gamma = Lambda u
    double pwrss = 0;       // |y - X beta - Z gamma|^2 + |u|^2
    double ldL2 = 0;        // 2 log det L, random-effects Cholesky
    double ldRX2 = 0;       // 2 log det Lx, fixed-effects Cholesky
    Eigen::MatrixXd unscaled_vcov;  // (X'X - Rzx'Rzx)^{-1}
  };

  // Exact beta/u solve for fixed theta by the sparse Cholesky route.
  Solution solve(const Eigen::VectorXd& theta);

  // -2 log (restricted) likelihood with sigma^2 profiled out.
  double profiled_deviance(const Eigen::VectorXd& theta, FitMethod method);

  // -2 log (restricted) likelihood at explicit (theta, log sigma); the
  // objective whose curvature drives the Satterthwaite approximation.
  double deviance_at(const Eigen::VectorXd& theta, double log_sigma,
                     FitMethod method);

  // Relative covariance factor for the full coefficient vector.
  Eigen::SparseMatrix<double> lambda(const Eigen::VectorXd& theta) const;

  int n() const { return n_; }
  int p() const { return p_; }
  int q() const { return q_; }
  double var_y() const { return var_y_; }
  double meansq_y() const { return meansq_y_; }
  const Eigen::SparseMatrix<double>& Z() const { return z_; }

 private:
  const ModelMatrices* mats_;
  int n_ = 0, p_ = 0, q_ = 0;
  double var_y_ = 0;
  double meansq_y_ = 0;
  Eigen::SparseMatrix<double> z_;    // blocks side by side, n x q
  Eigen::SparseMatrix<double> ztz_;
  Eigen::MatrixXd ztx_;
  Eigen::VectorXd zty_;
  Eigen::MatrixXd xtx_;
  Eigen::VectorXd xty_;
  double yty_ = 0;
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt_;
};

// Convenience wrapper constructing a fresh context per call.
double profiled_deviance(const ModelMatrices& mats,
                         const Eigen::VectorXd& theta, FitMethod method);

// One random term's estimated covariance on the response scale:
// Sigma_t = sigma^2 * lambda_t lambda_t'.
struct VarianceComponent {
  std::string grouping;
  std::vector<std::string> names;  // the k coefficient names
  bool correlated = true;
  Eigen::MatrixXd lambda;       // k x k lower-triangular relative factor
  Eigen::MatrixXd covariance;   // k x k
  Eigen::VectorXd stddev;       // k
  Eigen::MatrixXd correlation;  // k x k; rows/cols with zero sd hold 0
};

struct SingularComponent {
  std::string grouping;
  std::string component;  // coefficient name, or "corr(a, b)"
};

struct LmmFit {
  ModelMatrices mats;  // kept for prediction and curvature-based inference
  FitMethod method = FitMethod::REML;
  FitOptions options;

  Eigen::VectorXd theta;
  Eigen::VectorXd beta;
  Eigen::MatrixXd vcov_beta;  // sigma2 * (X'X - Rzx'Rzx)^{-1}
  double sigma2 = 0;
  double deviance = 0;
  std::vector<VarianceComponent> components;

  Eigen::VectorXd u;      // spherical modes at the optimum
  Eigen::VectorXd gamma;  // conditional modes per coefficient
  std::vector<Eigen::MatrixXd> ranef_values;  // per term: n_levels x k
  Eigen::VectorXd fitted;
  Eigen::VectorXd residuals;

  bool converged = false;
  int evaluations = 0;
  bool singular = false;
  std::vector<SingularComponent> singular_components;
};

// Minimizes the profiled deviance over the covariance parameters and
// recovers all downstream quantities. Deterministic. Refuses a model in
// which any single random term carries at least as many coefficients as
// there are observations.
LmmFit fit_lmm(const ModelMatrices& mats, const FitOptions& opts = {});

struct RanefRow {
  std::string grouping;
  std::string level;
  std::string column;
  double value;
};

// Conditional modes as a flat table ordered term, then level, then column.
std::vector<RanefRow> ranef(const LmmFit& fit);

// X beta (plus Z gamma when include_random) evaluated on new rows coded
// exactly as the training design. A log-transformed response is predicted
// on the log scale; the transform is not inverted. Grouping levels unseen
// at training time are an error only when their deviates are requested.
Eigen::VectorXd predict(const LmmFit& fit, const Dataset& ds,
                        bool include_random);

struct SingularReport {
  bool singular = false;
  std::vector<SingularComponent> components;
};

// Boundary test: a relative-factor diagonal within tol of zero (relative
// to the largest diagonal, with an absolute floor) or a derived
// correlation within tol of +/-1.
SingularReport is_singular(const LmmFit& fit, double tol);

// Human-readable summary mirroring the usual mixed-model output layout:
// method, deviance, random-effect variance/SD/correlation table, fixed
// effects, flags.
std::string summarize_fit(const LmmFit& fit);

// The same summary as a JSON document.
std::string fit_to_json(const LmmFit& fit);

}  // namespace lmmkit
