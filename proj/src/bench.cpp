#include "radslab/bench.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <stdexcept>

#include "radslab/hmatrix.hpp"

namespace radslab {

std::vector<Eigen::Vector3d> slab_points(std::size_t n, int layers, std::uint64_t seed) {
  if (layers < 1) throw std::invalid_argument("slab_points: layers must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n) / layers)));
  std::vector<Eigen::Vector3d> pts(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d lattice(static_cast<double>(i % side), static_cast<double>((i / side) % side),
                                  static_cast<double>(i / (side * side)));
    pts[i] = lattice / layers + 0.01 * Eigen::Vector3d(u(rng), u(rng), u(rng));
  }
  return pts;
}

double SlabKernel::operator()(std::size_t i, std::size_t j) const {
  const double r = ((*points)[i] - (*points)[j]).norm();
  if (r < 0.5 * h) return 1.0 / (h * h);
  return std::exp(-kappa * r) / (r * r);
}

HMatrixBench bench_hmatrix(std::size_t n, double eps, bool check_dense, int repeats) {
  if (n < 2) throw std::invalid_argument("bench_hmatrix: n must be >= 2");
  const int layers = 8;
  auto pts = slab_points(n, layers);
  const SlabKernel k{&pts, 1.0, 1.0 / layers};
  auto tree = std::make_shared<const ClusterTree>(pts, 32);

  HMatrixBench b;
  b.n = n;
  HMatrixOptions opts;
  opts.eps = eps;
  const auto t0 = std::chrono::steady_clock::now();
  HMatrix H(tree, tree, [&k](std::size_t i, std::size_t j) { return k(i, j); }, opts);
  b.build_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(static_cast<Eigen::Index>(n), -1.0, 1.0).array().sin();
  Eigen::VectorXd y;
  b.matvec_seconds = 1e300;
  for (int r = 0; r < std::max(1, repeats); ++r) {
    const auto a = std::chrono::steady_clock::now();
    y = H.matvec(x);
    b.matvec_seconds = std::min(b.matvec_seconds, std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count());
  }
  b.compression_ratio = H.compression_ratio();
  b.max_rank = H.max_rank();
  b.blocks = H.blocks().size();
  b.stored_entries = H.stored_entries();
  if (check_dense) {
    Eigen::VectorXd yd = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) yd(static_cast<Eigen::Index>(i)) += k(i, j) * x(static_cast<Eigen::Index>(j));
    b.relative_error = (y - yd).cwiseAbs().maxCoeff() / yd.cwiseAbs().maxCoeff();
  }
  return b;
}

NLogNFit fit_nlogn(const std::vector<double>& n, const std::vector<double>& t) {
  if (n.size() != t.size() || n.size() < 2) throw std::invalid_argument("fit_nlogn: need >= 2 matching samples");
  double sxx = 0, sxy = 0, mean = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double x = n[i] * std::log(n[i]);
    sxx += x * x;
    sxy += x * t[i];
    mean += t[i];
  }
  mean /= static_cast<double>(t.size());
  NLogNFit f;
  f.c = sxy / sxx;
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double e = t[i] - f.c * n[i] * std::log(n[i]);
    ss_res += e * e;
    ss_tot += (t[i] - mean) * (t[i] - mean);
  }
  f.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  return f;
}

}  // namespace radslab
