#pragma once

#include <string>
#include <vector>

#include "lmmkit/dataframe.hpp"
#include "lmmkit/estimate.hpp"

namespace lmmkit {

enum class AnovaSource { MixedSatterthwaite, ClassicalRM };

struct FTestRow {
  std::string term;
  double f_value = 0.0;
  int df1 = 0;
  double df2 = 0.0;
  double p_value = 1.0;
  // False when the ratio degenerates (0/0 error stratum, or no usable
  // denominator degrees of freedom); f/p are then not meaningful.
  bool defined = true;
};

struct AnovaTable {
  AnovaSource source = AnovaSource::MixedSatterthwaite;
  std::vector<FTestRow> rows;  // one per non-intercept fixed term, in order
  std::vector<std::string> warnings;
  // True when the variance-parameter Hessian was not positive definite
  // and every df2 fell back to the residual degrees of freedom.
  bool df_fallback = false;
};

// Wald F-tests of each fixed term with denominator degrees of freedom by
// the Satterthwaite method: the curvature of the deviance in
// (theta, log sigma) space yields the covariance of the variance
// parameters, each contrast variance is propagated through it, and
// multi-column terms aggregate their per-contrast df.
AnovaTable anova_satterthwaite(const LmmFit& fit);

// Fully within-subjects ANOVA by balanced sums-of-squares partitioning:
// every effect is tested against its interaction with subject. Requires
// every subject observed exactly once per within-cell.
AnovaTable classical_rm_anova(const Dataset& ds, const std::string& dv,
                              const std::string& subject,
                              const std::vector<std::string>& within);

struct LrtResult {
  double chisq = 0.0;
  int df = 0;
  double p_value = 1.0;
  // Null = fewer parameters; alt = more.
  double deviance_null = 0.0;
  double deviance_alt = 0.0;
  int params_null = 0;
  int params_alt = 0;
  // True when the parameters separating the models include a variance:
  // its null value sits on the boundary and the chi-square p-value is
  // conservative.
  bool boundary_caveat = false;
};

// Likelihood-ratio comparison of two nested fits on the same response.
// Comparing REML fits whose fixed effects differ is a hard error: their
// restricted likelihoods are not on a common scale.
LrtResult compare_models(const LmmFit& a, const LmmFit& b);

std::string format_anova_text(const AnovaTable& table);
std::string anova_to_json(const AnovaTable& table);
std::string format_lrt_text(const LrtResult& r);
std::string lrt_to_json(const LrtResult& r);

}  // namespace lmmkit
