#include <doctest.h>

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "radslab/bench.hpp"
#include "radslab/hmatrix.hpp"

using namespace radslab;

namespace {

std::vector<Eigen::Vector3d> cube_grid(int n) {
  std::vector<Eigen::Vector3d> p;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) p.emplace_back(i + 0.5, j + 0.5, k + 0.5);
  return p;
}

std::vector<Eigen::Vector3d> cloud(std::size_t n, const Eigen::Vector3d& centre, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<Eigen::Vector3d> p(n);
  for (auto& x : p) x = centre + Eigen::Vector3d(u(rng), u(rng), u(rng));
  return p;
}

double attenuated(const Eigen::Vector3d& x, const Eigen::Vector3d& y, double kappa) {
  const double r = (x - y).norm();
  return std::exp(-kappa * r) / (r * r);
}

Eigen::MatrixXd dense(const EntryFunction& f, std::size_t m, std::size_t n) {
  Eigen::MatrixXd A(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) A(i, j) = f(i, j);
  return A;
}

Eigen::MatrixXd expand(const CompressedBlock& b) {
  if (const auto* lr = std::get_if<LowRankBlock>(&b)) return lr->U * lr->V.transpose();
  return std::get<Eigen::MatrixXd>(b);
}

std::vector<std::size_t> iota(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), start);
  return v;
}

}  // namespace

TEST_CASE("bounding boxes") {
  BoundingBox a;
  a.extend(Eigen::Vector3d(0, 0, 0));
  a.extend(Eigen::Vector3d(1, 2, 0.5));
  CHECK(a.diameter() == doctest::Approx(std::sqrt(1 + 4 + 0.25)));
  CHECK(a.longest_axis() == 1);
  CHECK(a.contains(Eigen::Vector3d(0.5, 1, 0.25)));
  CHECK_FALSE(a.contains(Eigen::Vector3d(1.1, 1, 0.25)));
  CHECK(a.contains(Eigen::Vector3d(1.1, 1, 0.25), 0.2));
  BoundingBox b;
  b.extend(Eigen::Vector3d(4, 6, 0));
  CHECK(a.distance(b) == doctest::Approx(5.0));
  CHECK(b.distance(a) == doctest::Approx(5.0));
  BoundingBox c;
  c.extend(Eigen::Vector3d(1, 2, 0.5));
  CHECK(a.distance(c) == 0.0);
  a.extend(b);
  CHECK(a.hi.x() == 4);
}

TEST_CASE("cluster tree") {
  SUBCASE("small set is one leaf") {
    const ClusterTree t(cloud(20, Eigen::Vector3d::Zero(), 1), 32);
    CHECK(t.nodes().size() == 1);
    CHECK(t.root().leaf());
    CHECK(t.depth() == 0);
    CHECK(t.leaf_count() == 1);
  }
  SUBCASE("two separated clusters split first") {
    auto pts = cloud(64, Eigen::Vector3d::Zero(), 2);
    const auto far = cloud(64, Eigen::Vector3d(10, 0, 0), 3);
    pts.insert(pts.end(), far.begin(), far.end());
    std::shuffle(pts.begin(), pts.end(), std::mt19937_64(4));
    const ClusterTree t(pts, 16);
    const auto& root = t.root();
    REQUIRE_FALSE(root.leaf());
    for (int child : {root.left, root.right}) {
      const auto& n = t.nodes()[child];
      CHECK(n.size() == 64);
      const bool near = n.box.hi.x() < 5;
      CHECK((near || n.box.lo.x() > 5));
    }
  }
  SUBCASE("uniform 16^3 grid") {
    const ClusterTree t(cube_grid(16), 32);
    const std::size_t N = t.size();
    CHECK(t.leaf_count() >= N / 64);
    CHECK(t.leaf_count() <= N / 8);
    CHECK(t.depth() >= 6);

    const auto& perm = t.permutation();
    std::vector<std::size_t> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == iota(N));

    std::size_t covered = 0;
    for (const auto& n : t.nodes()) {
      CHECK(n.begin < n.end);
      if (n.leaf()) {
        CHECK(n.size() <= 32);
        covered += n.size();
      } else {
        const auto& l = t.nodes()[n.left];
        const auto& r = t.nodes()[n.right];
        CHECK(l.begin == n.begin);
        CHECK(l.end == r.begin);
        CHECK(r.end == n.end);
        CHECK(l.level == n.level + 1);
      }
      for (std::size_t i = n.begin; i < n.end; ++i) CHECK(n.box.contains(t.points()[perm[i]], 1e-12));
    }
    CHECK(covered == N);
  }
  SUBCASE("errors") {
    CHECK_THROWS(ClusterTree({}, 8));
    CHECK_THROWS(ClusterTree(cloud(4, Eigen::Vector3d::Zero(), 1), 0));
  }
}

TEST_CASE("cross approximation") {
  const auto rows = iota(80), cols = iota(60);
  SUBCASE("rank one") {
    const auto b = compress([](std::size_t i, std::size_t j) { return (1.0 + i) * std::cos(0.1 * j); }, rows, cols,
                            1e-12);
    REQUIRE(std::holds_alternative<LowRankBlock>(b));
    CHECK(std::get<LowRankBlock>(b).rank() == 1);
    const auto A = dense([](std::size_t i, std::size_t j) { return (1.0 + i) * std::cos(0.1 * j); }, 80, 60);
    CHECK((expand(b) - A).norm() <= 1e-13 * A.norm());
  }
  SUBCASE("zero block") {
    const auto b = compress([](std::size_t, std::size_t) { return 0.0; }, rows, cols, 1e-8);
    REQUIRE(std::holds_alternative<LowRankBlock>(b));
    CHECK(std::get<LowRankBlock>(b).rank() == 0);
  }
  SUBCASE("sparse entries are found by the full row scan") {
    const auto f = [](std::size_t i, std::size_t j) { return i == 70 && j == 3 ? 2.0 : 0.0; };
    const auto b = compress(f, rows, cols, 1e-8);
    CHECK((expand(b) - dense(f, 80, 60)).norm() == 0.0);
  }
  SUBCASE("random matrix falls back to dense") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g;
    Eigen::MatrixXd R(80, 60);
    for (Eigen::Index i = 0; i < R.size(); ++i) R.data()[i] = g(rng);
    const auto b = compress([&](std::size_t i, std::size_t j) { return R(i, j); }, rows, cols, 1e-8);
    REQUIRE(std::holds_alternative<Eigen::MatrixXd>(b));
    CHECK(std::get<Eigen::MatrixXd>(b) == R);
  }
  SUBCASE("index subsets") {
    const std::vector<std::size_t> r{5, 1, 9, 30}, c{2, 7};
    const auto b = compress([](std::size_t i, std::size_t j) { return 10.0 * i + j; }, r, c, 1e-10);
    const Eigen::MatrixXd A = expand(b);
    CHECK(A(0, 1) == doctest::Approx(57));
    CHECK(A(3, 0) == doctest::Approx(302));
  }
}

TEST_CASE("cross approximation of the attenuated kernel against SVD") {
  const auto x = cloud(512, Eigen::Vector3d::Zero(), 11);
  const auto y = cloud(512, Eigen::Vector3d(4, 0.5, 0), 12);
  const EntryFunction f = [&](std::size_t i, std::size_t j) { return attenuated(x[i], y[j], 0.7); };
  const auto b = compress(f, iota(512), iota(512), 1e-6);
  REQUIRE(std::holds_alternative<LowRankBlock>(b));
  const auto& lr = std::get<LowRankBlock>(b);
  CHECK(lr.rank() < 60);
  const Eigen::MatrixXd A = dense(f, 512, 512);
  const Eigen::BDCSVD<Eigen::MatrixXd> svd_err(A - expand(b));
  const Eigen::BDCSVD<Eigen::MatrixXd> svd_a(A);
  CHECK(svd_err.singularValues()(0) / svd_a.singularValues()(0) <= 1e-5);
  // the rank is near the optimal one for this tolerance
  const auto& s = svd_a.singularValues();
  Eigen::Index optimal = 0;
  while (optimal < s.size() && s(optimal) > 1e-6 * s(0)) ++optimal;
  CHECK(lr.rank() <= 3 * optimal + 2);
}

namespace {

struct Fixture {
  std::vector<Eigen::Vector3d> pts = slab_points(1024, 4, 5);
  SlabKernel kernel{&pts, 1.0, 0.25};
  std::shared_ptr<const ClusterTree> tree = std::make_shared<const ClusterTree>(pts, 32);
  EntryFunction entry = [this](std::size_t i, std::size_t j) { return kernel(i, j); };
};

}  // namespace

TEST_CASE("hierarchical matrix") {
  Fixture fx;
  const HMatrix H(fx.tree, fx.tree, fx.entry, {.eta = 2.0, .eps = 1e-8});
  const Eigen::MatrixXd A = dense(fx.entry, 1024, 1024);

  SUBCASE("matvec against dense") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1, 1);
    Eigen::VectorXd x(1024);
    for (auto& v : x) v = u(rng);
    const Eigen::VectorXd yd = A * x;
    CHECK((H.matvec(x) - yd).cwiseAbs().maxCoeff() / yd.cwiseAbs().maxCoeff() <= 1e-6);
    CHECK((H.to_dense() - A).norm() <= 1e-6 * A.norm());
  }
  SUBCASE("zero and linearity") {
    CHECK(H.matvec(Eigen::VectorXd(Eigen::VectorXd::Zero(1024))).cwiseAbs().maxCoeff() == 0.0);
    const Eigen::VectorXd u = Eigen::VectorXd::LinSpaced(1024, -1, 2);
    const Eigen::VectorXd v = Eigen::VectorXd::LinSpaced(1024, 3, 0).array().sin();
    const Eigen::VectorXd lhs = H.matvec(Eigen::VectorXd(2.5 * u - 0.75 * v));
    const Eigen::VectorXd rhs = 2.5 * H.matvec(u) - 0.75 * H.matvec(v);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-12 * rhs.cwiseAbs().maxCoeff());
  }
  SUBCASE("several right-hand sides") {
    Eigen::MatrixXd X(1024, 3);
    X.col(0).setOnes();
    X.col(1) = Eigen::VectorXd::LinSpaced(1024, 0, 1);
    X.col(2).setZero();
    const Eigen::MatrixXd Y = H.matvec(X);
    for (int c = 0; c < 3; ++c)
      CHECK((Y.col(c) - H.matvec(Eigen::VectorXd(X.col(c)))).cwiseAbs().maxCoeff() <= 1e-12 * (1 + Y.norm()));
  }
  SUBCASE("blocks partition the matrix and obey admissibility") {
    const auto& nodes = fx.tree->nodes();
    Eigen::MatrixXi cover = Eigen::MatrixXi::Zero(1024, 1024);
    bool any_low_rank = false;
    for (const auto& b : H.blocks()) {
      const auto& r = nodes[b.row_node];
      const auto& c = nodes[b.col_node];
      cover.block(r.begin, c.begin, r.size(), c.size()).array() += 1;
      if (b.low_rank()) {
        any_low_rank = true;
        CHECK(std::min(r.box.diameter(), c.box.diameter()) <= 2.0 * r.box.distance(c.box));
        CHECK(std::get<LowRankBlock>(b.data).rank() <= static_cast<Eigen::Index>(std::min(r.size(), c.size()) / 2));
      } else {
        CHECK(std::get<Eigen::MatrixXd>(b.data).rows() == static_cast<Eigen::Index>(r.size()));
      }
    }
    CHECK(any_low_rank);
    CHECK(cover.minCoeff() == 1);
    CHECK(cover.maxCoeff() == 1);
  }
  SUBCASE("storage accounting") {
    CHECK(H.dense_entries() == 1024u * 1024u);
    CHECK(H.stored_entries() < H.dense_entries());
    CHECK(H.compression_ratio() == doctest::Approx(static_cast<double>(H.stored_entries()) / H.dense_entries()));
    CHECK(H.max_rank() > 0);
  }
  SUBCASE("block dump") {
    std::ostringstream os;
    H.write_csv(os);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "level,row_begin,row_end,col_begin,col_end,rank,kind");
    std::size_t n = 0;
    while (std::getline(is, line)) {
      CHECK(std::count(line.begin(), line.end(), ',') == 6);
      ++n;
    }
    CHECK(n == H.blocks().size());
  }
}

TEST_CASE("custom admissibility") {
  Fixture fx;
  const HMatrix never(fx.tree, fx.tree, fx.entry,
                      {.eps = 1e-8, .admissible = [](const BoundingBox&, const BoundingBox&) { return false; }});
  for (const auto& b : never.blocks()) CHECK_FALSE(b.low_rank());
  CHECK(never.stored_entries() == never.dense_entries());

  // looser eta compresses more
  const HMatrix strict(fx.tree, fx.tree, fx.entry, {.eta = 0.5, .eps = 1e-8});
  const HMatrix loose(fx.tree, fx.tree, fx.entry, {.eta = 4.0, .eps = 1e-8});
  CHECK(loose.stored_entries() < strict.stored_entries());
}

TEST_CASE("rectangular operator between different trees") {
  const auto x = cloud(300, Eigen::Vector3d::Zero(), 21);
  const auto y = cloud(200, Eigen::Vector3d(0.3, 0, 0), 22);
  auto tx = std::make_shared<const ClusterTree>(x, 16);
  auto ty = std::make_shared<const ClusterTree>(y, 16);
  const EntryFunction f = [&](std::size_t i, std::size_t j) { return 1.0 / (0.05 + (x[i] - y[j]).norm()); };
  const HMatrix H(tx, ty, f, {.eps = 1e-10});
  CHECK(H.rows() == 300);
  CHECK(H.cols() == 200);
  const Eigen::VectorXd v = Eigen::VectorXd::LinSpaced(200, -1, 1);
  const Eigen::VectorXd yd = dense(f, 300, 200) * v;
  CHECK((H.matvec(v) - yd).cwiseAbs().maxCoeff() <= 1e-8 * yd.cwiseAbs().maxCoeff());
  CHECK_THROWS(H.matvec(Eigen::VectorXd(Eigen::VectorXd::Zero(300))));
}
