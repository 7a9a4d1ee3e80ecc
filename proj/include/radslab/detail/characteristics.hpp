#pragma once

#include <cmath>

namespace radslab::detail {

/// Exact solution of dI/ds + I = S(s) across one cell of optical length h
/// (in units of the ray's own path, i.e. dX/|mu|) with S linear between the
/// entry value s_in and exit value s_out.
inline double sweep_cell(double I_in, double h, double s_in, double s_out) {
  if (h <= 0.0) return I_in;
  double a, b;  // weights of s_in and s_out
  if (h < 1e-4) {
    a = h * (0.5 - h * (1.0 / 3.0 - h / 8.0));
    b = h * (0.5 - h * (1.0 / 6.0 - h / 24.0));
  } else {
    const double one_minus = -std::expm1(-h);
    b = 1.0 - one_minus / h;
    a = one_minus - b;
  }
  return I_in * std::exp(-h) + a * s_in + b * s_out;
}

}  // namespace radslab::detail
