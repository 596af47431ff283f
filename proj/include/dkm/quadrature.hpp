#pragma once

#include <functional>
#include <span>
#include <vector>

namespace dkm {

/// Integration below `restriction` uses adaptive 15-point Gauss-Kronrod;
/// everything from `restriction` on uses Romberg on a power-of-two panel
/// ladder capped at 2^romberg_levels panels. restriction = 0 is pure Romberg.
struct IntegrationPolicy {
  double restriction = 0.0;
  int romberg_levels = 12;
  double abs_tol = 1e-8;
};

using Integrand = std::function<double(double)>;

/// Throws ValidationError if a > b, IntegrationError when f returns a
/// non-finite value.
double integrate(const Integrand& f, double a, double b, const IntegrationPolicy& policy);

/// Cumulative integrals from `lower` to each sorted endpoint, sharing work
/// between consecutive endpoints.
std::vector<double> integrate_batch(const Integrand& f, std::span<const double> endpoints,
                                    const IntegrationPolicy& policy, double lower = 0.0);

double gauss_kronrod_adaptive(const Integrand& f, double a, double b, double abs_tol);
double romberg(const Integrand& f, double a, double b, int max_levels, double abs_tol);

}  // namespace dkm
