#pragma once

#include <Eigen/Core>
#include <vector>

#include "radslab/atmosphere.hpp"
#include "radslab/radiometry.hpp"
#include "radslab/stratified.hpp"

namespace radslab {

/// Discrete directions mu in [-1, 1] \ {0}, ascending and symmetric so that
/// node i and node size()-1-i are mirror images.
struct AngularGrid {
  std::vector<double> mu;
  std::vector<double> weights;

  /// Gauss-Legendre on each half range [-1, 0] and [0, 1]; n must be even.
  static AngularGrid double_gauss(int n);
  /// Gauss-Legendre on the full range [-1, 1]; n must be even.
  static AngularGrid full_range(int n);

  std::size_t size() const { return mu.size(); }
  void validate() const;
};

struct DOOptions {
  double tol = 1e-10;
  int max_iter = 5000;
};

struct DOResult {
  /// Intensity per frequency, (level x direction).
  std::vector<Eigen::MatrixXd> I;
  MomentField moments;
  Eigen::VectorXd T;
  int iterations = 0;
  bool converged = false;
  std::vector<double> residual_history;
};

/// Brute-force discrete ordinates solution of the slab problem on the
/// atmosphere's tau levels: upwind characteristic sweeps per direction with
/// the explicit phase-function double sum and the same temperature closure.
DOResult do_solve(const AtmosphereModel& atm, const BoundarySources& src, const AngularGrid& angular,
                  const DOOptions& opts = {});

struct DOReference {
  MomentField moments;
  Eigen::VectorXd T;
  DOResult coarse;
  DOResult fine;
};

/// Richardson extrapolation fine + (fine - coarse)/(2^order - 1).
DOReference richardson(DOResult coarse, DOResult fine, double order = 2.0);

/// do_solve at n and 2n directions, extrapolated.
DOReference do_reference(const AtmosphereModel& atm, const BoundarySources& src, int n = 32,
                         const DOOptions& opts = {});

}  // namespace radslab
