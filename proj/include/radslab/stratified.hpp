#pragma once

#include <Eigen/Core>
#include <chrono>
#include <memory>
#include <vector>

#include "radslab/atmosphere.hpp"
#include "radslab/radiometry.hpp"

namespace radslab {

/// Angular moments J, K, L of the intensity, (frequency x level).
struct MomentField {
  Eigen::MatrixXd J;
  Eigen::MatrixXd K;
  Eigen::MatrixXd L;

  static MomentField zeros(Eigen::Index n_freq, Eigen::Index n_levels);
};

/// Source terms of the reduced transport equation (mu d/dtau + kappa) I = R + kappa a P mu^2.
///   R = kappa a ((9/8 - b/8) J + beta K - 3/8 (1-b) L) + kappa (1-a) B(T)
///   P = 3/8 (1-b) (3L - J)
/// R_hat is R / kappa, the source per unit optical depth, kept separately so
/// that it stays finite where kappa = 0.
struct SourceField {
  Eigen::MatrixXd R;
  Eigen::MatrixXd P;
  Eigen::MatrixXd R_hat;
};

struct SolveReport {
  int iterations = 0;
  std::vector<double> residual_history;
  bool converged = false;
  std::chrono::duration<double> wall_time{0};
  /// Pointwise decreases of J or T between consecutive iterates, beyond a
  /// round-off allowance of 1e-12 of the field's max norm.
  int monotonicity_violations = 0;
  /// max over levels of |int kappa(1-a)(B(T) - J) dnu|.
  double closure_residual = 0.0;
  /// Same, divided by int kappa(1-a) J dnu at that level.
  double closure_residual_relative = 0.0;
};

struct SolveOptions {
  double tol = 1e-8;
  int max_iter = 200;
};

struct StratifiedResult {
  MomentField moments;
  Eigen::VectorXd T;  // scaled temperature per level
  SourceField sources;
  SolveReport report;
};

/// Integral-form solver for the stratified slab. Kernel weight matrices are
/// built once per distinct optical-depth profile and ground reflectivity and
/// shared between frequencies.
class StratifiedSolver {
 public:
  StratifiedSolver(AtmosphereModel atm, BoundarySources src);
  ~StratifiedSolver();
  StratifiedSolver(StratifiedSolver&&) noexcept;
  StratifiedSolver& operator=(StratifiedSolver&&) noexcept;

  const AtmosphereModel& atmosphere() const { return atm_; }
  const BoundarySources& sources() const { return src_; }

  /// Optical depth X(tau) = int_0^tau kappa for frequency p.
  double optical_depth(std::size_t p, double tau) const;
  const Eigen::VectorXd& optical_depth_nodes(std::size_t p) const;

  /// S_i for i in {3,4,5}: attenuated boundary radiation, including the
  /// single ground reflection of the downward source.
  double boundary_moment_S(int i, std::size_t p, double tau) const;
  /// F_i(tau, t) = 1/2 E_i(|X(tau) - X(t)|) + r/2 E_i(X(tau) + X(t)).
  double kernel_F(int i, std::size_t p, double tau, double t) const;

  SourceField compute_sources(const MomentField& m, const Eigen::VectorXd& T) const;
  MomentField update_moments(const SourceField& s) const;
  /// Temperature closure per level; levels with no absorbing frequency get T = 0.
  Eigen::VectorXd update_temperature(const MomentField& m) const;
  /// Closure residuals (absolute, relative) for a state.
  std::pair<double, double> closure_residual(const MomentField& m, const Eigen::VectorXd& T) const;

  /// I(tau, mu) by integrating the linear-in-X source along the characteristic.
  double reconstruct_intensity(double tau, double mu, std::size_t p, const SourceField& s) const;

  StratifiedResult solve(const SolveOptions& opts = {}) const;

 private:
  struct KernelSet;
  static std::unique_ptr<KernelSet> build_kernels(const Eigen::VectorXd& X, double r);
  const KernelSet& kernels(std::size_t p) const;

  AtmosphereModel atm_;
  BoundarySources src_;
  std::vector<Eigen::VectorXd> X_;        // optical depth nodes per frequency
  std::vector<std::size_t> kernel_index_;  // frequency -> kernel set
  std::vector<std::unique_ptr<KernelSet>> kernel_sets_;
  Eigen::MatrixXd S3_, S4_, S5_;          // boundary terms at nodes
};

/// Free-function forms of the solver operations.
double boundary_moment_S(int i, std::size_t nu_index, double tau, const AtmosphereModel& atm,
                         const BoundarySources& src);
double kernel_F(int i, std::size_t nu_index, double tau, double t, const AtmosphereModel& atm);
SourceField compute_sources(const MomentField& m, const Eigen::VectorXd& T, const AtmosphereModel& atm);
MomentField update_moments(const SourceField& s, const AtmosphereModel& atm, const BoundarySources& src);
StratifiedResult solve(const AtmosphereModel& atm, const BoundarySources& src, const SolveOptions& opts = {});

/// int J_nu dnu at each level.
Eigen::VectorXd spectral_total(const Eigen::MatrixXd& field, const SpectralGrid& grid);

}  // namespace radslab
