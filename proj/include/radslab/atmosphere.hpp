#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "radslab/radiometry.hpp"

namespace radslab {

/// Air density as a function of scaled altitude. Affine profiles are
/// integrated in closed form, anything else by adaptive Simpson.
struct DensityProfile {
  std::function<double(double)> rho;
  /// (c0, c1) when rho(z) = c0 + c1 z.
  std::optional<std::pair<double, double>> affine;

  static DensityProfile constant(double value);
  static DensityProfile linear(double c0, double c1);
  /// rho(z) = 1 - 3z/4.
  static DensityProfile standard();
  /// Piecewise-linear interpolation of (z, rho) knots, constant beyond the ends.
  static DensityProfile piecewise_linear(std::vector<double> z, std::vector<double> rho);
};

/// The optical-thickness coordinate tau(z) = int_0^z rho on a column [0, z_top].
class OpticalColumn {
 public:
  OpticalColumn(DensityProfile rho, double z_top, std::vector<double> z_nodes, std::vector<double> tau_nodes);

  const std::vector<double>& z_nodes() const { return z_nodes_; }
  const std::vector<double>& tau_nodes() const { return tau_nodes_; }
  std::size_t size() const { return tau_nodes_.size(); }
  double Z() const { return tau_nodes_.back(); }
  double z_top() const { return z_top_; }
  const DensityProfile& density() const { return rho_; }

  double tau_of_z(double z) const;
  double z_of_tau(double tau) const;

 private:
  DensityProfile rho_;
  double z_top_;
  std::vector<double> z_nodes_;
  std::vector<double> tau_nodes_;
};

/// Column with n_nodes levels uniformly spaced in tau. Throws
/// std::invalid_argument if rho < 0 on the sampled grid or tau is not
/// strictly increasing.
OpticalColumn build_column(const DensityProfile& rho, double z_top, int n_nodes);

/// amax * 4/(ZM-Zm)^2 * (z-Zm)^+ (ZM-z)^+
double cloud_albedo(double z, double Zm, double ZM, double amax);

/// Combined anisotropic / Rayleigh phase function
///   b + beta mu' + 3/8 (1-b)(3 - mu^2 + (3mu^2 - 1) mu'^2),
/// normalized so that 1/2 int p dmu' = 1.
/// Requires |beta| <= b so the density stays nonnegative.
double phase_function(double mu, double mu_prime, double b, double beta);

/// Piecewise-constant absorption spectrum kappa(nu) on cells [edges[i], edges[i+1]).
struct KappaSpectrum {
  std::vector<double> edges;
  std::vector<double> values;

  static KappaSpectrum grey(double kappa);
  /// Stand-in for measured data: 0.5 below nu' = 3, 0.1 above.
  static KappaSpectrum gemini_like();
  /// Tabulated (nu, kappa) samples, each owning the cell between the midpoints
  /// to its neighbours.
  static KappaSpectrum from_samples(const std::vector<double>& nu, const std::vector<double>& kappa);

  double operator()(double nu) const;
  /// Interior cell edges.
  std::vector<double> breakpoints() const;
};

struct Band {
  double nu_lo;
  double nu_hi;
  double kappa;
};

/// Baseline spectrum overridden by non-overlapping bands.
struct BandSpec {
  KappaSpectrum baseline = KappaSpectrum::gemini_like();
  std::vector<Band> bands;

  void validate() const;
  double kappa(double nu) const;
  std::vector<double> breakpoints() const;
};

/// CSV `nu_lo,nu_hi,kappa`.
std::vector<Band> read_band_file(const std::filesystem::path& path);
/// CSV `nu,kappa`.
KappaSpectrum read_kappa_table(const std::filesystem::path& path);

enum class BetaMode { none, half_albedo, constant };

struct CloudParams {
  double z_min;  // scaled altitude
  double z_max;
  double amax = 0.3;
  BetaMode beta_mode = BetaMode::half_albedo;
  double beta_value = 0.0;
};

struct RayleighParams {
  double nu_threshold = 3.0;
  double strength = 0.3;
  double z_min;
  double z_max;
};

struct AtmosphereOptions {
  /// Isotropic scattering albedo outside cloud and Rayleigh regions.
  double albedo = 0.0;
  std::optional<CloudParams> cloud;
  std::optional<RayleighParams> rayleigh;
  double r_ground = 0.0;
};

/// Dense (frequency x level) coefficient fields for the stratified solver.
struct AtmosphereModel {
  OpticalColumn column;
  SpectralGrid grid;
  Eigen::MatrixXd kappa;   // absorption, >= 0
  Eigen::MatrixXd albedo;  // a in [0, 1]
  Eigen::MatrixXd beta;    // |beta| <= b
  Eigen::MatrixXd b;       // isotropic / Rayleigh mixing in [0, 1]
  Eigen::VectorXd r_ground;

  std::size_t n_freq() const { return grid.size(); }
  std::size_t n_levels() const { return column.size(); }
  void validate() const;
};

/// Inside the cloud the albedo is the baseline plus the cloud bump (capped at
/// 1) with b = 1; in the Rayleigh region, above the frequency threshold, the
/// albedo is the Rayleigh strength with b = 0. Overlapping cloud and Rayleigh
/// altitude ranges are rejected.
AtmosphereModel build_atmosphere(const OpticalColumn& column, const SpectralGrid& grid, const BandSpec& bands,
                                 const AtmosphereOptions& opts);

}  // namespace radslab
