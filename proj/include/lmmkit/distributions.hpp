#pragma once

namespace lmmkit {

// Regularized incomplete beta I_x(a, b), continued-fraction evaluation,
// relative accuracy around 1e-12. Requires a > 0, b > 0, x in [0, 1].
double incomplete_beta(double a, double b, double x);

// Regularized upper incomplete gamma Q(a, x) = Γ(a, x)/Γ(a).
double upper_gamma_q(double a, double x);

// Upper tail P(F > f) for the F(df1, df2) distribution. f <= 0 gives 1.
double f_tail(double f, double df1, double df2);

// Upper tail P(X > x) for the chi-square distribution with df > 0.
double chisq_tail(double x, double df);

// Upper tail P(T > t) for Student's t with df > 0 (one-sided).
double t_tail(double t, double df);

}  // namespace lmmkit
