#include "radslab/specfun.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace radslab {

namespace {

constexpr double kEulerGamma = 0.57721566490153286061;
constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr int kMaxTerms = 500;

// Power series about x = 0, valid for x <= 1.
double expint_series(int n, double x) {
  const int nm1 = n - 1;
  double ans = (nm1 != 0) ? 1.0 / nm1 : -std::log(x) - kEulerGamma;
  double fact = 1.0;
  for (int i = 1; i <= kMaxTerms; ++i) {
    fact *= -x / i;
    double del;
    if (i != nm1) {
      del = -fact / (i - nm1);
    } else {
      double psi = -kEulerGamma;
      for (int ii = 1; ii <= nm1; ++ii) psi += 1.0 / ii;
      del = fact * (-std::log(x) + psi);
    }
    ans += del;
    if (std::abs(del) < std::abs(ans) * kEps) return ans;
  }
  return ans;
}

// Continued fraction (modified Lentz), valid for x > 1.
double expint_cfrac(int n, double x) {
  constexpr double kTiny = 1e-300;
  const int nm1 = n - 1;
  double b = x + n;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= kMaxTerms; ++i) {
    const double a = -static_cast<double>(i) * (nm1 + i);
    b += 2.0;
    d = 1.0 / (a * d + b);
    c = b + a / c;
    const double del = c * d;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h * std::exp(-x);
}

}  // namespace

void ExpIntOrder::throw_bad_order(int p) {
  throw std::domain_error("expint: order must be in 1..5, got " + std::to_string(p));
}

namespace detail {

double expint_any(int n, double x) {
  if (n == 0) return std::exp(-x) / x;
  if (x == 0.0) return n == 1 ? std::numeric_limits<double>::infinity() : 1.0 / (n - 1);
  // exp(-x) underflows past ~745; E_n(x) < exp(-x)/x there.
  if (x > 745.0) return 0.0;
  return x > 1.0 ? expint_cfrac(n, x) : expint_series(n, x);
}

}  // namespace detail

double expint(ExpIntOrder p, double x) {
  if (!(x >= 0.0)) throw std::domain_error("expint: argument must be >= 0");
  if (p.value() == 1 && x == 0.0) throw std::domain_error("expint: E_1 diverges at 0");
  return detail::expint_any(p.value(), x);
}

std::vector<double> expint_batch(ExpIntOrder p, std::span<const double> xs) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (double x : xs) out.push_back(expint(p, x));
  return out;
}

}  // namespace radslab
