#include "radslab/radiometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "radslab/quadrature.hpp"

namespace radslab {

namespace {
constexpr double kPi4Over15 = std::numbers::pi * std::numbers::pi * std::numbers::pi * std::numbers::pi / 15.0;
}

void BoundarySources::validate() const {
  if (QS < 0 || QE < 0 || TS < 0 || TE < 0)
    throw std::invalid_argument("sources: coefficients and temperatures must be nonnegative");
  if (QS > 0 && TS <= 0) throw std::invalid_argument("sources: QS > 0 requires TS > 0");
  if (QE > 0 && TE <= 0) throw std::invalid_argument("sources: QE > 0 requires TE > 0");
}

double BoundarySources::q_plus(double nu) const { return QE > 0 ? QE * planck(nu, TE) : 0.0; }
double BoundarySources::q_minus(double nu) const { return QS > 0 ? QS * planck(nu, TS) : 0.0; }

void SpectralGrid::validate() const {
  if (nodes.empty() || nodes.size() != weights.size())
    throw std::invalid_argument("spectral grid: nodes and weights must be nonempty and equal length");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!(nodes[i] > 0)) throw std::invalid_argument("spectral grid: nodes must be positive");
    if (i > 0 && !(nodes[i] > nodes[i - 1]))
      throw std::invalid_argument("spectral grid: nodes must be strictly increasing");
    if (!(weights[i] > 0)) throw std::invalid_argument("spectral grid: weights must be positive");
  }
}

SpectralGrid make_spectral_grid(const SpectralGridOptions& opts) {
  if (!(opts.nu_max > opts.nu_first) || !(opts.nu_first > 0) || opts.panels < 1 || opts.nodes_per_panel < 1)
    throw std::invalid_argument("spectral grid: bad options");
  std::vector<double> edges{0.0};
  const double ratio = std::pow(opts.nu_max / opts.nu_first, 1.0 / opts.panels);
  for (int k = 0; k <= opts.panels; ++k) edges.push_back(opts.nu_first * std::pow(ratio, k));
  edges.back() = opts.nu_max;
  for (double b : opts.breakpoints)
    if (b > 0 && b < opts.nu_max) edges.push_back(b);
  std::sort(edges.begin(), edges.end());
  // Drop edges that coincide to round-off.
  std::vector<double> clean{edges.front()};
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (edges[i] - clean.back() > 1e-12 * opts.nu_max) clean.push_back(edges[i]);
  clean.back() = opts.nu_max;

  SpectralGrid grid;
  grid.nu_max = opts.nu_max;
  for (std::size_t i = 0; i + 1 < clean.size(); ++i) {
    const auto rule = gauss_legendre(opts.nodes_per_panel, clean[i], clean[i + 1]);
    grid.nodes.insert(grid.nodes.end(), rule.nodes.begin(), rule.nodes.end());
    grid.weights.insert(grid.weights.end(), rule.weights.begin(), rule.weights.end());
  }
  return grid;
}

double planck(double nu, double T) {
  if (!(nu > 0)) throw std::domain_error("planck: frequency must be positive");
  if (!(T >= 0)) throw std::domain_error("planck: temperature must be nonnegative");
  if (T == 0.0) return 0.0;
  const double x = nu / T;
  if (x > 700.0) return 0.0;
  return ScaledUnits::B0 * nu * nu * nu / std::expm1(x);
}

double planck_dT(double nu, double T) {
  if (T <= 0.0) return 0.0;
  const double x = nu / T;
  if (x > 700.0) return 0.0;
  // e^x / (e^x - 1)^2 = 1 / ((e^x - 1)(1 - e^-x))
  return ScaledUnits::B0 * nu * nu * nu * (x / T) / (std::expm1(x) * -std::expm1(-x));
}

double planck_total(double T) { return ScaledUnits::B0 * kPi4Over15 * T * T * T * T; }

double calibrate_source(double power_wm2, double T_scaled) {
  if (!(power_wm2 > 0)) throw std::domain_error("calibrate_source: power must be positive");
  if (!(T_scaled > 0)) throw std::domain_error("calibrate_source: temperature must be positive");
  return power_wm2 / (ScaledUnits::flux_scale * planck_total(T_scaled));
}

double closure_emission(double T, std::span<const double> c, const SpectralGrid& grid) {
  double s = 0.0;
  for (std::size_t p = 0; p < grid.size(); ++p)
    if (c[p] != 0.0) s += grid.weights[p] * c[p] * planck(grid.nodes[p], T);
  return s;
}

double invert_temperature(double target, std::span<const double> c, const SpectralGrid& grid) {
  if (c.size() != grid.size()) throw std::invalid_argument("invert_temperature: weight/grid size mismatch");
  if (!(target >= 0)) throw std::domain_error("invert_temperature: target must be nonnegative");
  bool any = false;
  for (double w : c) {
    if (w < 0) throw std::invalid_argument("invert_temperature: weights must be nonnegative");
    any = any || w > 0;
  }
  if (!any) throw std::invalid_argument("invert_temperature: all closure weights are zero");
  if (target == 0.0) return 0.0;

  auto residual = [&](double T) { return closure_emission(T, c, grid) - target; };
  auto slope = [&](double T) {
    double s = 0.0;
    for (std::size_t p = 0; p < grid.size(); ++p)
      if (c[p] != 0.0) s += grid.weights[p] * c[p] * planck_dT(grid.nodes[p], T);
    return s;
  };

  double lo = 0.0, hi = 1.0;
  while (residual(hi) < 0) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e30) throw std::runtime_error("invert_temperature: failed to bracket root");
  }
  // Safeguarded Newton inside the bracket [lo, hi].
  double T = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    const double f = residual(T);
    if (f == 0.0) return T;
    if (f < 0) lo = T; else hi = T;
    const double d = slope(T);
    double next = (d > 0) ? T - f / d : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - T) <= 4e-16 * T || hi - lo <= 4e-16 * hi) {
      T = next;
      break;
    }
    T = next;
  }
  return T;
}

}  // namespace radslab
