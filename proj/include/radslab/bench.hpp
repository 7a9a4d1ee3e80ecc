#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <vector>

namespace radslab {

/// Points of a flat slab with `layers` levels, jittered lattice, unit height.
std::vector<Eigen::Vector3d> slab_points(std::size_t n, int layers = 8, std::uint64_t seed = 1);

/// e^{-kappa r} / r^2 between slab points, with the diagonal set to 1/h^2.
struct SlabKernel {
  const std::vector<Eigen::Vector3d>* points;
  double kappa = 1.0;
  double h = 0.125;

  double operator()(std::size_t i, std::size_t j) const;
};

struct HMatrixBench {
  std::size_t n = 0;
  double build_seconds = 0.0;
  double matvec_seconds = 0.0;  // best of the repeats
  double compression_ratio = 0.0;
  Eigen::Index max_rank = 0;
  std::size_t blocks = 0;
  std::size_t stored_entries = 0;
  /// max |H x - A x| / max |A x| against the exact product, when requested.
  std::optional<double> relative_error;
};

HMatrixBench bench_hmatrix(std::size_t n, double eps, bool check_dense = false, int repeats = 3);

/// Least-squares fit t = c N log N; r2 is the coefficient of determination.
struct NLogNFit {
  double c = 0.0;
  double r2 = 0.0;
};

NLogNFit fit_nlogn(const std::vector<double>& n, const std::vector<double>& t);

}  // namespace radslab
