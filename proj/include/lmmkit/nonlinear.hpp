#pragma once

#include <array>
#include <string>
#include <vector>

#include "lmmkit/dataframe.hpp"

namespace lmmkit {

// y(t) = alpha + delta * exp(lambda * t): asymptote alpha, change delta
// (intercept alpha + delta), rate lambda (negative for approach from
// below/above). Defaults are the canonical start values.
struct NegExpParams {
  double alpha = 80.0;
  double delta = -70.0;
  double lambda = -1.0;
};

double negexp_predict(const NegExpParams& p, double t);

// Partial derivatives of the prediction in (alpha, delta, lambda) order.
std::array<double, 3> negexp_jacobian(const NegExpParams& p, double t);

struct NegExpSubjectFit {
  NegExpParams params;
  double sse = 0.0;
  bool converged = false;
  // True when the fitted curve carries no exponential signal (delta at
  // zero), leaving lambda unidentified.
  bool degenerate = false;
  int iterations = 0;
  int n_points = 0;
};

// Damped Gauss-Newton (Levenberg-Marquardt) least squares with the
// analytic Jacobian. Pairs with a non-finite time or value are dropped;
// at least 4 usable points are required and the times must not all be
// equal. A fit that exhausts the damping or iteration budget comes back
// best-so-far with converged = false.
NegExpSubjectFit fit_negexp_subject(const std::vector<double>& times,
                                    const std::vector<double>& y,
                                    const NegExpParams& start = {});

struct ExcludedSubject {
  std::string subject;
  std::string reason;
};

// Two-stage population summary: every subject is fit separately, the
// fixed effects are the mean of the converged estimates, and each
// deviate is that subject's departure from the mean, so
// fixed + deviate[i] reproduces estimate[i] exactly.
struct NegExpPopulationFit {
  NegExpParams fixed;
  std::vector<std::string> subjects;    // converged subjects, level order
  std::vector<NegExpParams> estimates;  // parallel stage-1 estimates
  std::vector<NegExpParams> deviates;
  std::vector<double> sse;
  std::array<std::array<double, 3>, 3> deviate_cov{};  // sample covariance
  std::vector<ExcludedSubject> excluded;
};

NegExpPopulationFit fit_negexp_population(const Dataset& ds,
                                          const std::string& dv,
                                          const std::string& time,
                                          const std::string& subject,
                                          const NegExpParams& start = {});

// Per-subject equation table plus the population line.
std::string format_negexp_text(const NegExpPopulationFit& fit);
std::string negexp_to_json(const NegExpPopulationFit& fit);

}  // namespace lmmkit
