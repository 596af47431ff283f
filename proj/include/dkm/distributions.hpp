#pragma once

namespace dkm {

/// Regularized upper incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a).
double regularized_gamma_q(double a, double x);

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
double chi_square_sf(double x, double df = 1.0);

/// Upper tail of the standard normal, P(Z > z).
double normal_sf(double z);

/// Two-sided normal p-value 2 P(Z > |z|).
double normal_two_sided_p(double z);

}  // namespace dkm
