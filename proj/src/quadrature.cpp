#include "dkm/quadrature.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "dkm/error.hpp"

namespace dkm {

namespace {

double checked(const Integrand& f, double x) {
  const double v = f(x);
  if (!std::isfinite(v)) {
    throw IntegrationError(x, "integrand is not finite at t = " + std::to_string(x));
  }
  return v;
}

// Kronrod 15-point abscissae (nonnegative half) and weights; the Gauss 7-point
// rule uses the odd-indexed abscissae.
constexpr std::array<double, 8> kXgk = {
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000};
constexpr std::array<double, 8> kWgk = {
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
constexpr std::array<double, 4> kWg = {
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

struct RuleResult {
  double kronrod;
  double error;
};

RuleResult gk15(const Integrand& f, double a, double b) {
  const double center = 0.5 * (a + b);
  const double half = 0.5 * (b - a);
  const double fc = checked(f, center);
  double resk = fc * kWgk[7];
  double resg = fc * kWg[3];
  for (int j = 0; j < 7; ++j) {
    const double dx = half * kXgk[j];
    const double f1 = checked(f, center - dx);
    const double f2 = checked(f, center + dx);
    resk += kWgk[j] * (f1 + f2);
    if (j % 2 == 1) resg += kWg[j / 2] * (f1 + f2);
  }
  return {resk * half, std::abs((resk - resg) * half)};
}

double gk_recurse(const Integrand& f, double a, double b, double tol, const RuleResult& whole,
                  int depth) {
  if (whole.error <= tol || depth >= 40) return whole.kronrod;
  const double mid = 0.5 * (a + b);
  const RuleResult left = gk15(f, a, mid);
  const RuleResult right = gk15(f, mid, b);
  if (left.error + right.error <= tol) return left.kronrod + right.kronrod;
  return gk_recurse(f, a, mid, 0.5 * tol, left, depth + 1) +
         gk_recurse(f, mid, b, 0.5 * tol, right, depth + 1);
}

}  // namespace

double gauss_kronrod_adaptive(const Integrand& f, double a, double b, double abs_tol) {
  if (b <= a) return 0.0;
  return gk_recurse(f, a, b, abs_tol, gk15(f, a, b), 0);
}

double romberg(const Integrand& f, double a, double b, int max_levels, double abs_tol) {
  if (b <= a) return 0.0;
  max_levels = std::max(max_levels, 1);
  constexpr int kMinLevels = 2;
  std::vector<double> prev, curr;
  prev.reserve(static_cast<std::size_t>(max_levels) + 1);
  curr.reserve(static_cast<std::size_t>(max_levels) + 1);
  double h = b - a;
  prev.push_back(0.5 * h * (checked(f, a) + checked(f, b)));
  for (int level = 1; level <= max_levels; ++level) {
    const long panels = 1L << (level - 1);
    double sum = 0.0;
    for (long i = 0; i < panels; ++i) sum += checked(f, a + (static_cast<double>(i) + 0.5) * h);
    curr.clear();
    curr.push_back(0.5 * prev[0] + 0.5 * h * sum);
    double factor = 1.0;
    for (int m = 1; m <= level; ++m) {
      factor *= 4.0;
      curr.push_back(curr[m - 1] + (curr[m - 1] - prev[m - 1]) / (factor - 1.0));
    }
    if (level >= kMinLevels &&
        std::abs(curr[static_cast<std::size_t>(level)] - prev[static_cast<std::size_t>(level) - 1]) <=
            abs_tol) {
      return curr[static_cast<std::size_t>(level)];
    }
    std::swap(prev, curr);
    h *= 0.5;
  }
  return prev.back();
}

double integrate(const Integrand& f, double a, double b, const IntegrationPolicy& policy) {
  if (!(a <= b)) throw ValidationError("integrate: lower limit exceeds upper limit");
  if (a == b) return 0.0;
  const double tr = policy.restriction;
  const double split = std::clamp(tr, a, b);
  const double width = b - a;
  double total = 0.0;
  if (split > a) {
    total += gauss_kronrod_adaptive(f, a, split, policy.abs_tol * (split - a) / width);
  }
  if (b > split) {
    total += romberg(f, split, b, policy.romberg_levels, policy.abs_tol * (b - split) / width);
  }
  return total;
}

std::vector<double> integrate_batch(const Integrand& f, std::span<const double> endpoints,
                                    const IntegrationPolicy& policy, double lower) {
  for (std::size_t i = 1; i < endpoints.size(); ++i) {
    if (endpoints[i] < endpoints[i - 1]) {
      throw ValidationError("integrate_batch: endpoints must be sorted ascending");
    }
  }
  std::vector<double> out(endpoints.size(), 0.0);
  if (endpoints.empty()) return out;
  if (endpoints.front() < lower) {
    throw ValidationError("integrate_batch: endpoint below the lower limit");
  }
  const double span = endpoints.back() - lower;
  double acc = 0.0;
  double from = lower;
  for (std::size_t i = 0; i < endpoints.size(); ++i) {
    const double to = endpoints[i];
    if (to > from) {
      IntegrationPolicy piece = policy;
      piece.abs_tol = policy.abs_tol * (to - from) / span;
      acc += integrate(f, from, to, piece);
      from = to;
    }
    out[i] = acc;
  }
  return out;
}

}  // namespace dkm
