#pragma once

#include <span>
#include <vector>

namespace radslab {

/// Order of an exponential integral. The solvers only ever need E_1 ... E_5,
/// so construction outside that range throws std::domain_error.
class ExpIntOrder {
 public:
  constexpr ExpIntOrder(int p) : p_(p) {  // NOLINT(google-explicit-constructor)
    if (p < 1 || p > 5) throw_bad_order(p);
  }
  constexpr int value() const { return p_; }

 private:
  [[noreturn]] static void throw_bad_order(int p);
  int p_;
};

/// E_p(x) = int_0^1 exp(-x/mu) mu^(p-2) dmu.
///
/// Relative accuracy is close to machine precision on [1e-300, 700]; the
/// result is exactly zero once exp(-x) underflows. Throws std::domain_error
/// for x < 0 and for (p = 1, x = 0).
double expint(ExpIntOrder p, double x);

/// Elementwise expint.
std::vector<double> expint_batch(ExpIntOrder p, std::span<const double> xs);

namespace detail {

/// E_n(x) for any n >= 0, no argument checking beyond the E_1(0) pole (which
/// returns +inf). Used by the product-integration rules that need E_6, E_7.
double expint_any(int n, double x);

}  // namespace detail
}  // namespace radslab
