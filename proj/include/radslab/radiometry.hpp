#pragma once

#include <span>
#include <vector>

namespace radslab {

/// Scaled unit system. Frequencies are nu' = 1e-14 nu and temperatures
/// T' = T / 4798, so the Planck function reads B0 nu'^3 / (exp(nu'/T') - 1).
struct ScaledUnits {
  static constexpr double B0 = 1.4744e-8;
  static constexpr double nu_scale = 1e-14;         // per Hz
  static constexpr double kelvin_per_unit = 4798.0;  // T = T' * 4798
  /// Physical flux per unit scaled spectral integral: int B dnu' * 1e14 is W/m^2.
  static constexpr double flux_scale = 1e14;

  static constexpr double to_scaled_temperature(double kelvin) { return kelvin / kelvin_per_unit; }
  static constexpr double to_kelvin(double scaled) { return scaled * kelvin_per_unit; }
};

/// Boundary emitters. The ground emits Q+ = QE B(TE) upward, the top of the
/// column receives Q- = QS B(TS) downward.
struct BoundarySources {
  double QS = 0.0;
  double QE = 0.0;
  double TS = 0.0;
  double TE = 0.0;

  /// Throws std::invalid_argument on negative entries or a positive
  /// coefficient paired with a zero temperature.
  void validate() const;
  double q_plus(double nu) const;
  double q_minus(double nu) const;
};

/// Frequency nodes and weights for int_0^{nu_max} dnu'.
struct SpectralGrid {
  std::vector<double> nodes;
  std::vector<double> weights;
  double nu_max = 0.0;

  std::size_t size() const { return nodes.size(); }
  void validate() const;
};

struct SpectralGridOptions {
  double nu_max = 40.0;
  /// Left edge of the first geometric panel; [0, nu_first] is one extra panel.
  double nu_first = 5e-3;
  int panels = 32;
  int nodes_per_panel = 8;
  /// Extra panel edges (band limits) so piecewise-constant coefficients are
  /// integrated exactly. Each one inside (0, nu_max) splits a panel.
  std::vector<double> breakpoints;
};

/// Composite Gauss-Legendre on log-spaced panels; 256 nodes with the defaults.
SpectralGrid make_spectral_grid(const SpectralGridOptions& opts = {});

/// Scaled Planck function B0 nu^3 / expm1(nu/T). Zero at T = 0.
double planck(double nu, double T);
/// dB/dT at fixed nu.
double planck_dT(double nu, double T);
/// Analytic int_0^inf planck(nu, T) dnu = B0 pi^4 T^4 / 15.
double planck_total(double T);

/// Coefficient Q with power = Q * B0 * 1e14 * pi^4/15 * T^4.
double calibrate_source(double power_wm2, double T_scaled);

/// Solve sum_p w_p c_p planck(nu_p, T) = target for T >= 0, where w are the
/// grid weights and c the per-frequency closure weights kappa(1 - a).
/// Throws std::invalid_argument if every c_p is zero.
double invert_temperature(double target, std::span<const double> closure_weights,
                          const SpectralGrid& grid);

/// sum_p w_p c_p planck(nu_p, T); the left side of the closure equation.
double closure_emission(double T, std::span<const double> closure_weights, const SpectralGrid& grid);

}  // namespace radslab
