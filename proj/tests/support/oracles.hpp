#pragma once

// Reference computations used only by the tests. They are deliberately
// simple and share no code with the library.

#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <utility>
#include <vector>

namespace oracle {

inline double simpson_step(const std::function<double(double)>& f, double a, double b, double fa, double fm,
                           double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double diff = left + right - whole;
  if (depth <= 0 || std::abs(diff) <= 15.0 * tol) return left + right + diff / 15.0;
  return simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

/// Adaptive Simpson with Richardson correction; tol is absolute.
inline double integrate(const std::function<double(double)>& f, double a, double b, double tol = 1e-13,
                        int max_depth = 48) {
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return simpson_step(f, a, b, fa, fm, fb, whole, tol, max_depth);
}

/// Gauss-Legendre nodes and weights on [a, b] by Newton iteration on P_n.
inline std::pair<std::vector<double>, std::vector<double>> gauss(int n, double a = -1.0, double b = 1.0) {
  std::vector<double> x(n), w(n);
  for (int i = 0; i < n; ++i) {
    double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = z;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      if (n == 1) p0 = 1.0;
      dp = n * (z * p1 - p0) / (z * z - 1.0);
      const double dz = p1 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-16) break;
    }
    x[n - 1 - i] = 0.5 * (a + b) + 0.5 * (b - a) * z;
    w[n - 1 - i] = (b - a) / ((1.0 - z * z) * dp * dp);
  }
  return {x, w};
}

/// Composite Gauss-Legendre over equal panels.
inline double composite_gauss(const std::function<double(double)>& f, double a, double b, int panels, int n = 16) {
  double s = 0.0;
  const double h = (b - a) / panels;
  for (int p = 0; p < panels; ++p) {
    auto [x, w] = gauss(n, a + p * h, a + (p + 1) * h);
    for (int i = 0; i < n; ++i) s += w[i] * f(x[i]);
  }
  return s;
}

/// Root of a monotone function on [lo, hi] by plain bisection.
inline double bisect(const std::function<double(double)>& f, double lo, double hi, double tol = 1e-14) {
  double flo = f(lo);
  if (flo * f(hi) > 0) throw std::runtime_error("bisect: no sign change");
  while (hi - lo > tol * std::max(1.0, std::abs(hi))) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if ((fm < 0) == (flo < 0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

/// E_p(x) from its definition int_0^1 exp(-x/mu) mu^(p-2) dmu (x > 0).
inline double expint_quad(int p, double x) {
  // substitute mu = exp(-s): int_0^inf exp(-x e^s) e^{-(p-1)s} ds
  auto f = [&](double s) { return std::exp(-x * std::exp(s) - (p - 1) * s); };
  const double upper = std::log(750.0 / x) + 1.0;
  return integrate(f, 0.0, std::max(upper, 1.0), 1e-15 * std::exp(-x));
}

inline double planck(double nu, double T) {
  constexpr double B0 = 1.4744e-8;
  if (T == 0.0) return 0.0;
  return B0 * nu * nu * nu / std::expm1(nu / T);
}

}  // namespace oracle
