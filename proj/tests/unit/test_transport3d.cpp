#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "radslab/csv.hpp"
#include "radslab/specfun.hpp"
#include "radslab/transport3d.hpp"

using namespace radslab;

namespace {

constexpr double kPi = std::numbers::pi;

OperatorOptions dense_opts(bool flux = true) {
  OperatorOptions o;
  o.hierarchical = false;
  o.with_flux = flux;
  return o;
}

/// Fraction of the circle of radius d about (px, py) inside [0, Lx] x [0, Ly].
double circle_fraction_inside(double px, double py, double d, double Lx, double Ly) {
  if (d == 0.0) return 1.0;
  std::vector<double> phi{0.0, 2 * kPi};
  auto add = [&](double a) {
    a = std::fmod(a + 4 * kPi, 2 * kPi);
    phi.push_back(a);
  };
  auto cos_cut = [&](double c) {
    if (std::abs(c) < 1) {
      add(std::acos(c));
      add(-std::acos(c));
    }
  };
  auto sin_cut = [&](double s) {
    if (std::abs(s) < 1) {
      add(std::asin(s));
      add(kPi - std::asin(s));
    }
  };
  cos_cut((Lx - px) / d);
  cos_cut(-px / d);
  sin_cut((Ly - py) / d);
  sin_cut(-py / d);
  std::sort(phi.begin(), phi.end());
  double inside = 0;
  for (std::size_t i = 0; i + 1 < phi.size(); ++i) {
    const double m = 0.5 * (phi[i] + phi[i + 1]);
    const double x = px + d * std::cos(m), y = py + d * std::sin(m);
    if (x >= 0 && x <= Lx && y >= 0 && y <= Ly) inside += phi[i + 1] - phi[i];
  }
  return inside / (2 * kPi);
}

/// 1/4pi int |omega_z| over directions from x that leave the box through
/// the ground or the top.
double floor_and_ceiling_view(const Eigen::Vector3d& x, const Eigen::Vector3d& L) {
  auto f = [&](double mu) {
    if (mu == 0.0) return 0.0;
    const double t = mu < 0 ? x.z() / -mu : (L.z() - x.z()) / mu;
    const double d = t * std::sqrt(1 - mu * mu);
    return 0.5 * std::abs(mu) * circle_fraction_inside(x.x(), x.y(), d, L.x(), L.y());
  };
  return oracle::composite_gauss(f, -1.0, 0.0, 2000) + oracle::composite_gauss(f, 0.0, 1.0, 2000);
}

long flat_index(const std::array<int, 3>& res, int i, int j, int k) {
  return (static_cast<long>(k) * res[1] + j) * res[0] + i;
}

}  // namespace

TEST_CASE("terrain") {
  const auto flat = Terrain::flat();
  CHECK(flat.is_flat());
  CHECK(flat(0.3, 0.7) == 0.0);
  CHECK(flat.gradient(1, 1).norm() == 0.0);

  const auto v = Terrain::valley(4, 4, 0.3);
  CHECK_FALSE(v.is_flat());
  CHECK(v(0.8, 2.0) > v(2.0, 2.0));
  CHECK(v(0.8, 2.0) <= 0.3 * (1 + 1e-6));
  CHECK(v(2.0, 1.0) >= 0.0);
  // ridge crest: zero slope across the ridge
  CHECK(std::abs(v.gradient(0.8, 2.0).x()) < 1e-3 * 0.3);
  const double e = 1e-4;
  CHECK(v.gradient(1.3, 0.7).y() == doctest::Approx((v(1.3, 0.7 + e) - v(1.3, 0.7 - e)) / (2 * e)).epsilon(1e-5));
  CHECK_THROWS(Terrain::valley(0, 1, 0.1));

  const auto path = std::filesystem::temp_directory_path() / "radslab_terrain_test.csv";
  {
    std::ofstream out(path);
    out << "x,y,g\n0,0,0\n2,0,0.2\n0,1,0.4\n2,1,0\n";
  }
  const auto t = Terrain::from_csv(path);
  CHECK(t(1.0, 0.5) == doctest::Approx(0.15));
  CHECK(t(0.0, 0.5) == doctest::Approx(0.2));
  CHECK(t(5.0, -1.0) == doctest::Approx(0.2));
  {
    std::ofstream out(path);
    out << "x,y,g\n0,0,0\n2,0,0.2\n0,1,0.4\n";
  }
  CHECK_THROWS_AS(Terrain::from_csv(path), std::runtime_error);
  {
    std::ofstream out(path);
    out << "x,y,h\n0,0,0\n";
  }
  CHECK_THROWS(Terrain::from_csv(path));
  std::filesystem::remove(path);
}

TEST_CASE("voxel grid") {
  const VoxelGrid g({2, 1, 1}, {4, 2, 5});
  CHECK(g.n_cells() == 40);
  CHECK(g.n_active() == 40);
  CHECK(g.cell_volume() == doctest::Approx(0.5 * 0.5 * 0.2));
  CHECK(g.center(1, 0, 2).isApprox(Eigen::Vector3d(0.75, 0.25, 0.5)));
  CHECK(g.active_index(3, 1, 4) == 39);
  CHECK(g.active_index(4, 0, 0) == -1);
  CHECK(g.masked(-1, 0, 0));
  const auto c = g.locate({1.9, 0.1, 1.0});
  REQUIRE(c);
  CHECK(*c == std::array<int, 3>{3, 0, 4});
  CHECK_FALSE(g.locate({2.1, 0.5, 0.5}));
  const auto box = g.cell_box(5);
  CHECK(box.contains(g.active_centers()[5]));
  CHECK((box.hi - box.lo).isApprox(g.spacing()));

  CHECK_THROWS_AS(VoxelGrid({1, 1, 1}, {1, 4, 4}), std::invalid_argument);
  CHECK_THROWS_AS(VoxelGrid({1, 0, 1}, {4, 4, 4}), std::invalid_argument);
  CHECK_THROWS_AS(VoxelGrid({1, 1, 1}, {4, 4, 4}, Terrain{[](double, double) { return 2.0; }}),
                  std::invalid_argument);

  const VoxelGrid hills({4, 4, 1}, {16, 8, 10}, Terrain::valley(4, 4, 0.4));
  CHECK(hills.n_active() < hills.n_cells());
  for (std::size_t a = 0; a < hills.n_active(); ++a) {
    const auto& cc = hills.active_centers()[a];
    CHECK(cc.z() >= hills.terrain()(cc.x(), cc.y()));
    const auto& ijk = hills.cell_of(a);
    CHECK(hills.active_index(ijk[0], ijk[1], ijk[2]) == static_cast<long>(a));
  }
}

TEST_CASE("line attenuation") {
  const VoxelGrid g({2, 2, 1}, {8, 8, 6});
  const Eigen::Vector3d x(0.1, 0.3, 0.2), y(1.7, 1.1, 0.9);
  CHECK(line_attenuation(x, y, g, [](const Eigen::Vector3d&) { return 2.5; }) ==
        doctest::Approx(2.5 * (y - x).norm()).epsilon(1e-14));
  CHECK(line_attenuation(x, x, g, [](const Eigen::Vector3d&) { return 2.5; }) == 0.0);
  const auto affine = [](const Eigen::Vector3d& p) { return 0.3 + 0.5 * p.x() - 0.2 * p.y() + 1.5 * p.z(); };
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    const Eigen::Vector3d a(2 * u(rng), 2 * u(rng), u(rng)), b(2 * u(rng), 2 * u(rng), u(rng));
    const double exact = (b - a).norm() * 0.5 * (affine(a) + affine(b));
    CHECK(std::abs(line_attenuation(a, b, g, affine) - exact) <= 1e-10 * std::max(1.0, exact));
  }
  // axis-aligned segment exactly on voxel faces
  CHECK(line_attenuation({0, 0.5, 0.5}, {2, 0.5, 0.5}, g, affine) ==
        doctest::Approx(2 * (0.3 + 0.5 - 0.1 + 0.75)).epsilon(1e-12));
}

TEST_CASE("visibility over terrain") {
  const VoxelGrid flat({2, 2, 1}, {4, 4, 4});
  CHECK(segment_visible({0.1, 0.1, 0.01}, {1.9, 1.9, 0.01}, flat));
  const VoxelGrid hills({4, 4, 1}, {32, 8, 16}, Terrain::valley(4, 4, 0.5));
  // across the left ridge near the ground
  CHECK_FALSE(segment_visible({0.1, 2.0, 0.05}, {2.0, 2.0, 0.05}, hills));
  // above it
  CHECK(segment_visible({0.1, 2.0, 0.9}, {2.0, 2.0, 0.9}, hills));
}

TEST_CASE("column optics") {
  const auto u = ColumnOptics::uniform(1.5, 2.0);
  CHECK(u.kappa(0.7) == 1.5);
  CHECK(u.albedo(0.3) == 0.0);
  CHECK(u.depth(2.0) == doctest::Approx(3.0));
  CHECK(u.depth(0.5) == doctest::Approx(0.75));
  CHECK(u.attenuation({0, 0, 0.2}, {0.3, 0.4, 0.2}) == doctest::Approx(0.75));
  CHECK(u.attenuation({0, 0, 0.2}, {0, 0.3, 0.6}) == doctest::Approx(0.75));
  CHECK_THROWS(ColumnOptics::uniform(-1, 1));

  const auto atm = fixture::grey_slab({.kappa = 2.0, .Z = 1.0, .albedo = 0.25});
  const ColumnOptics o(atm, 1);
  CHECK(o.z_top() == doctest::Approx(1.0));
  CHECK(o.kappa(0.4) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(o.albedo(0.4) == doctest::Approx(0.25));
  CHECK(o.depth(1.0) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK_THROWS_AS(ColumnOptics(atm, 99), std::out_of_range);

  // standard column: depth matches the stratified optical depth
  const auto col = build_column(DensityProfile::standard(), 1.0, 64);
  BandSpec bands;
  bands.baseline = KappaSpectrum::grey(3.0);
  const auto std_atm = build_atmosphere(col, make_spectral_grid({.panels = 1, .nodes_per_panel = 2}), bands, {});
  const ColumnOptics s(std_atm, 0);
  for (double z : {0.1, 0.5, 0.9}) CHECK(s.depth(z) == doctest::Approx(3.0 * col.tau_of_z(z)).epsilon(1e-5));
}

TEST_CASE("mirrors and boundary") {
  const VoxelGrid g({2, 3, 1}, {4, 6, 4});
  const auto walls = side_walls(g, 0.7);
  REQUIRE(walls.size() == 4);
  CHECK(walls[1].position == 2.0);
  CHECK(walls[3].position == 3.0);
  CHECK(walls[1].mirror(Eigen::Vector3d(1.5, 1, 0.5)).isApprox(Eigen::Vector3d(2.5, 1, 0.5)));
  BoundingBox b;
  b.extend(Eigen::Vector3d(0.5, 0, 0));
  b.extend(Eigen::Vector3d(1.0, 1, 1));
  const auto m = walls[0].mirror(b);
  CHECK(m.lo.x() == -1.0);
  CHECK(m.hi.x() == -0.5);
  CHECK_THROWS(side_walls(g, 1.2));

  const auto bd = make_boundary(g);
  CHECK(bd.size() == 2 * 24);
  double ground = 0, top = 0;
  for (const auto& p : bd) {
    (p.kind == BoundaryPatch::Kind::ground ? ground : top) += p.area;
    CHECK(std::abs(p.normal.norm() - 1) < 1e-14);
    CHECK(p.normal.z() == (p.kind == BoundaryPatch::Kind::ground ? -1.0 : 1.0));
  }
  CHECK(ground == doctest::Approx(6.0));
  CHECK(top == doctest::Approx(6.0));

  const VoxelGrid hills({4, 4, 1}, {8, 8, 8}, Terrain::valley(4, 4, 0.4));
  double hill_area = 0;
  for (const auto& p : make_boundary(hills))
    if (p.kind == BoundaryPatch::Kind::ground) {
      hill_area += p.area;
      CHECK(p.normal.z() < 0);
      CHECK(p.center.z() == doctest::Approx(hills.terrain()(p.center.x(), p.center.y())));
    }
  CHECK(hill_area > 16.0);
}

TEST_CASE("self kernel") {
  // 1/4pi int over the cell of e^{-kappa r}/r^2 = 1/4pi sum over faces of
  // int_face (1 - e^{-kappa r})/kappa d/r^3 dA
  auto face_oracle = [](const Eigen::Vector3d& h, double kappa) {
    double total = 0;
    for (int a = 0; a < 3; ++a) {
      const double d = 0.5 * h[a], eb = 0.5 * h[(a + 1) % 3], ec = 0.5 * h[(a + 2) % 3];
      const double face = oracle::composite_gauss(
          [&](double u) {
            return oracle::composite_gauss(
                [&](double v) {
                  const double r = std::sqrt(d * d + u * u + v * v);
                  const double f = kappa == 0 ? r : -std::expm1(-kappa * r) / kappa;
                  return f * d / (r * r * r);
                },
                -ec, ec, 48);
          },
          -eb, eb, 48);
      total += 2 * face;
    }
    return total / (4 * kPi);
  };
  for (const Eigen::Vector3d h : {Eigen::Vector3d(0.1, 0.1, 0.1), Eigen::Vector3d(0.25, 0.25, 0.05)})
    for (double kappa : {0.0, 1e-6, 0.3, 5.0, 80.0}) {
      CAPTURE(kappa);
      CHECK(self_kernel(h, kappa)[0] == doctest::Approx(face_oracle(h, kappa)).epsilon(1e-7));
    }
  // close to the ball of equal volume
  const Eigen::Vector3d cube(0.1, 0.1, 0.1);
  const double r_eq = std::cbrt(3 * 1e-3 / (4 * kPi));
  CHECK(std::abs(self_kernel(cube, 0.0)[0] / r_eq - 1) < 0.02);
  const auto k = self_kernel(cube, 1.0);
  for (int c = 1; c < 4; ++c) CHECK(std::abs(k[c]) <= 1e-14 * k[0]);
  // isotropic second moments of a cube: omega_a omega_b averages to delta_ab / 3
  CHECK(k[4] == doctest::Approx(k[0] / 3).epsilon(1e-12));
  CHECK(std::abs(k[5]) <= 1e-14 * k[0]);
}

TEST_CASE("surface operators") {
  const VoxelGrid g({2, 2, 1}, {8, 8, 4});
  const auto bd = make_boundary(g);
  const auto optics = ColumnOptics::uniform(0.0, 1.0);
  const auto ops = assemble_surface_ops(g, bd, optics, dense_opts());
  REQUIRE(ops.G.rows() == static_cast<Eigen::Index>(g.n_active()));
  REQUIRE(ops.G.cols() == static_cast<Eigen::Index>(bd.size()));

  SUBCASE("zero boundary source") {
    CHECK(ops.G.apply(Eigen::VectorXd::Zero(bd.size())).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("transparent box against a direct angular quadrature") {
    const Eigen::VectorXd J = ops.G.apply(Eigen::VectorXd::Ones(bd.size()));
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<std::size_t> pick(0, g.n_active() - 1);
    for (int n = 0; n < 10; ++n) {
      const auto i = pick(rng);
      const double ref = floor_and_ceiling_view(g.active_centers()[i], g.extent());
      CAPTURE(i);
      CHECK(std::abs(J(i) - ref) <= 1e-3 * ref);
    }
    // an unbounded pair of planes would give 1/2
    CHECK(J.maxCoeff() < 0.5);
  }
  SUBCASE("entries are positive and dominate the flux") {
    const Eigen::MatrixXd G = ops.G.to_dense();
    CHECK(G.minCoeff() >= 0.0);
    for (int a = 0; a < 3; ++a) REQUIRE(ops.Gw[a].rows() == G.rows());
    const Eigen::MatrixXd Gx = ops.Gw[0].to_dense(), Gy = ops.Gw[1].to_dense(), Gz = ops.Gw[2].to_dense();
    const Eigen::MatrixXd mag = (Gx.array().square() + Gy.array().square() + Gz.array().square()).sqrt().matrix();
    CHECK((mag - G).maxCoeff() <= 1e-14 * G.maxCoeff());
  }
}

TEST_CASE("surface flux vanishes at the centre of a symmetric box") {
  const VoxelGrid g({2, 2, 1}, {7, 7, 5});
  const auto bd = make_boundary(g);
  const auto ops = assemble_surface_ops(g, bd, ColumnOptics::uniform(0.8, 1.0), dense_opts());
  const Eigen::VectorXd Q = Eigen::VectorXd::Ones(bd.size());
  const long c = g.active_index(3, 3, 2);
  const double J = ops.G.apply(Q)(c);
  CHECK(J > 0);
  for (int a = 0; a < 3; ++a) CHECK(std::abs(ops.Gw[a].apply(Q)(c)) <= 1e-12 * J);
  // off-centre the flux points away from the nearer boundary
  const long low = g.active_index(3, 3, 0);
  CHECK(ops.Gw[2].apply(Q)(low) > 0);
}

TEST_CASE("volume operators: transparent ball") {
  const VoxelGrid g({2, 2, 2}, {16, 16, 16});
  OperatorOptions o;
  o.with_flux = true;
  const auto ops = assemble_volume_ops(g, ColumnOptics::uniform(0.0, 2.0), o);
  REQUIRE(ops.G.hierarchical());
  const long c = g.active_index(8, 8, 8);
  const Eigen::Vector3d xc = g.active_centers()[c];
  const double rho = 0.75;
  Eigen::VectorXd S = Eigen::VectorXd::Zero(g.n_active());
  for (std::size_t j = 0; j < g.n_active(); ++j)
    if ((g.active_centers()[j] - xc).norm() <= rho) S(j) = 1.0;

  CHECK(ops.G.apply(Eigen::VectorXd::Zero(g.n_active())).cwiseAbs().maxCoeff() == 0.0);
  const double J = ops.G.apply(S)(c);
  CHECK(std::abs(J / rho - 1.0) <= 0.03);
  // spherically symmetric source: no net flux at the centre
  for (int a = 0; a < 3; ++a) CHECK(std::abs(ops.Gw[a].apply(S)(c)) <= 1e-5 * J);
}

TEST_CASE("ball error shrinks under refinement") {
  // averaged over radii, since the voxel count of a single ball jumps
  const auto optics = ColumnOptics::uniform(0.0, 2.0);
  auto error = [&](int n) {
    const VoxelGrid g({2, 2, 2}, {n, n, n});
    const long c = g.active_index(n / 2, n / 2, n / 2);
    const Eigen::Vector3d xc = g.active_centers()[c];
    std::vector<double> K(g.n_active());
    for (std::size_t j = 0; j < g.n_active(); ++j)
      K[j] = static_cast<long>(j) == c ? self_kernel(g.spacing(), 0.0)[0] : volume_kernel(xc, g.cell_box(j), optics)[0];
    double sum = 0;
    int count = 0;
    for (double rho = 0.5; rho <= 0.801; rho += 0.025, ++count) {
      double J = 0;
      for (std::size_t j = 0; j < g.n_active(); ++j)
        if ((g.active_centers()[j] - xc).norm() <= rho) J += K[j];
      sum += std::abs(J / rho - 1.0);
    }
    return sum / count;
  };
  const double e16 = error(16), e32 = error(32);
  CHECK(e16 <= 0.03);
  CHECK(e32 < 0.6 * e16);
}

TEST_CASE("volume kernel in an absorbing medium") {
  // a thin distant cell behaves like a point source
  const auto optics = ColumnOptics::uniform(1.2, 4.0);
  BoundingBox b;
  b.lo = Eigen::Vector3d(2.0, 0, 1.0);
  b.hi = Eigen::Vector3d(2.01, 0.01, 1.01);
  const Eigen::Vector3d x(0, 0, 1.0);
  const Eigen::Vector3d y = 0.5 * (b.lo + b.hi);
  const double r = (y - x).norm();
  const auto k = volume_kernel(x, b, optics);
  const double point = 1e-6 * std::exp(-1.2 * r) / (4 * kPi * r * r);
  CHECK(k[0] == doctest::Approx(point).epsilon(1e-4));
  // omega points from source to target
  CHECK(k[1] == doctest::Approx(-k[0] * (y - x).x() / r).epsilon(1e-4));
}

TEST_CASE("hierarchical and dense operators agree") {
  const VoxelGrid g({4, 4, 1}, {16, 16, 16});
  const auto optics = ColumnOptics::uniform(2.0, 1.0);
  OperatorOptions h;
  h.with_flux = false;
  const auto H = assemble_volume_ops(g, optics, h);
  const Eigen::MatrixXd D = assemble_volume_ops(g, optics, dense_opts(false)).G.to_dense();
  const double norm = D.cwiseAbs().rowwise().sum().maxCoeff();
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int t = 0; t < 20; ++t) {
    Eigen::VectorXd v(g.n_active());
    for (auto& x : v) x = u(rng);
    const Eigen::VectorXd d = H.G.apply(v) - D * v;
    CHECK(d.cwiseAbs().maxCoeff() <= h.eps * norm * v.cwiseAbs().maxCoeff());
  }
  CHECK(H.G.stored_entries() < static_cast<std::size_t>(D.size()));
  CHECK(D.minCoeff() >= 0.0);
}

TEST_CASE("reflected operators") {
  const VoxelGrid a({2, 2, 1}, {8, 8, 4});
  const auto optics = ColumnOptics::uniform(0.0, 1.0);
  const auto bd = make_boundary(a);

  SUBCASE("zero reflectivity") {
    const auto refl = assemble_reflected_ops(a, side_walls(a, 0.0), bd, optics, dense_opts());
    REQUIRE(refl.size() == 4);
    for (const auto& r : refl) {
      CHECK(r.volume.G.empty());
      CHECK(r.surface.G.empty());
    }
  }
  SUBCASE("image method") {
    const ReflectivePlane wall{0, 2.0, 1.0};
    const auto refl = assemble_reflected_ops(a, {wall}, bd, optics, dense_opts());
    REQUIRE(refl.size() == 1);
    const VoxelGrid b({4, 2, 1}, {16, 8, 4});
    const auto bb = make_boundary(b);
    const auto direct = assemble_volume_ops(b, optics, dense_opts());
    const auto direct_s = assemble_surface_ops(b, bb, optics, dense_opts());
    const Eigen::MatrixXd R = refl[0].volume.G.to_dense(), Rs = refl[0].surface.G.to_dense();
    const Eigen::MatrixXd D = direct.G.to_dense(), Ds = direct_s.G.to_dense();
    const Eigen::MatrixXd Rx = refl[0].volume.Gw[0].to_dense(), Dx = direct.Gw[0].to_dense();
    const auto& ra = a.resolution();
    const auto& rb = b.resolution();
    double worst = 0, worst_s = 0, worst_x = 0;
    for (std::size_t i = 0; i < a.n_active(); ++i) {
      const auto& ci = a.cell_of(i);
      const long bi = flat_index(rb, ci[0], ci[1], ci[2]);
      for (std::size_t j = 0; j < a.n_active(); ++j) {
        const auto& cj = a.cell_of(j);
        const long bj = flat_index(rb, rb[0] - 1 - cj[0], cj[1], cj[2]);
        worst = std::max(worst, std::abs(R(i, j) - D(bi, bj)) / D(bi, bj));
        // the image flux has the mirrored x component
        worst_x = std::max(worst_x, std::abs(Rx(i, j) - Dx(bi, bj)) / D(bi, bj));
      }
      for (std::size_t p = 0; p < bd.size(); ++p) {
        const int ix = static_cast<int>(p % ra[0]), rest = static_cast<int>(p / ra[0]);
        const int iy = rest % ra[1], top = rest / ra[1];
        const long q = (static_cast<long>(top) * rb[1] + iy) * rb[0] + (rb[0] - 1 - ix);
        worst_s = std::max(worst_s, std::abs(Rs(i, p) - Ds(bi, q)) / Ds(bi, q));
      }
    }
    CHECK(worst <= 1e-8);
    CHECK(worst_s <= 1e-8);
    CHECK(worst_x <= 1e-8);
  }
  SUBCASE("two planes add up") {
    const std::vector<ReflectivePlane> planes{{0, 0.0, 1.0}, {1, 2.0, 0.5}};
    const auto refl = assemble_reflected_ops(a, planes, bd, optics, dense_opts(false));
    const auto direct = assemble_volume_ops(a, optics, dense_opts(false));
    const auto folded = assemble_folded_ops(a, planes, bd, optics, dense_opts(false));
    const Eigen::MatrixXd sum = direct.G.to_dense() + refl[0].volume.G.to_dense() + refl[1].volume.G.to_dense();
    CHECK((folded.volume.G.to_dense() - sum).cwiseAbs().maxCoeff() <= 1e-13 * sum.maxCoeff());
    // the 0.5 mirror contributes half of a perfect one
    const auto full = assemble_reflected_ops(a, {{1, 2.0, 1.0}}, bd, optics, dense_opts(false));
    CHECK((full[0].volume.G.to_dense() - 2 * refl[1].volume.G.to_dense()).cwiseAbs().maxCoeff() <=
          1e-13 * sum.maxCoeff());
  }
  SUBCASE("errors") {
    CHECK_THROWS(assemble_reflected_ops(a, {{2, 0.0, 1.0}}, bd, optics));
    CHECK_THROWS(assemble_reflected_ops(a, {{0, 0.0, 1.5}}, bd, optics));
    OperatorOptions o = dense_opts();
    o.with_dipole = true;
    CHECK_THROWS(assemble_folded_ops(a, side_walls(a, 1.0), bd, optics, o));
  }
}

TEST_CASE("ground boundary condition") {
  const VoxelGrid g({2, 2, 1}, {4, 4, 4});
  const auto bd = make_boundary(g);
  const auto src = fixture::standard_sources();
  auto optics_of = [](const AtmosphereModel& atm) {
    std::vector<ColumnOptics> o;
    for (std::size_t p = 0; p < atm.n_freq(); ++p) o.emplace_back(atm, p);
    return o;
  };
  SUBCASE("no reflection") {
    const auto atm = fixture::grey_slab({.kappa = 1.0});
    const auto Q = ground_boundary_condition(g, bd, atm, src, optics_of(atm));
    for (std::size_t p = 0; p < atm.n_freq(); ++p)
      for (std::size_t b = 0; b < bd.size(); ++b) {
        const double nu = atm.grid.nodes[p];
        const double want = bd[b].kind == BoundaryPatch::Kind::ground ? src.q_plus(nu) : src.q_minus(nu);
        CHECK(Q(b, p) == doctest::Approx(want).epsilon(1e-15));
      }
  }
  SUBCASE("transparent column reflects with 2 r E3(0) = r") {
    const auto atm = fixture::grey_slab({.kappa = 0.0, .r = 0.3});
    const auto Q = ground_boundary_condition(g, bd, atm, src, optics_of(atm));
    for (std::size_t p = 0; p < atm.n_freq(); ++p) {
      const double nu = atm.grid.nodes[p];
      CHECK(Q(0, p) == doctest::Approx(src.q_plus(nu) + 0.3 * src.q_minus(nu)).epsilon(1e-14));
    }
  }
  SUBCASE("angle average of the reflected sunlight") {
    const auto atm = fixture::grey_slab({.kappa = 0.8, .r = 0.3});
    const BoundarySources sun{src.QS, 0.0, src.TS, 0.0};
    const auto Q = ground_boundary_condition(g, bd, atm, sun, optics_of(atm));
    for (std::size_t p = 0; p < atm.n_freq(); ++p) {
      const double qs = sun.q_minus(atm.grid.nodes[p]);
      // 1/4pi int (omega.n)^- Q domega over the sphere
      const double avg = oracle::integrate([&](double mu) { return 0.5 * std::max(-mu, 0.0) * Q(0, p); }, -1.0, 1.0,
                                           1e-14 * qs);
      CHECK(avg == doctest::Approx(0.5 * qs * 0.3 * expint(3, 0.8)).epsilon(1e-10));
    }
  }
  SUBCASE("relief shortens the column above the ground") {
    const VoxelGrid hills({4, 4, 1}, {8, 8, 8}, Terrain::valley(4, 4, 0.4));
    const auto hb = make_boundary(hills);
    const auto atm = fixture::grey_slab({.kappa = 2.0, .r = 0.3});
    const BoundarySources sun{src.QS, 0.0, src.TS, 0.0};
    const auto Q = ground_boundary_condition(hills, hb, atm, sun, optics_of(atm));
    for (std::size_t b = 0; b < hb.size(); ++b) {
      if (hb[b].kind != BoundaryPatch::Kind::ground) continue;
      const double z = hb[b].center.z();
      CHECK(Q(b, 0) == doctest::Approx(sun.q_minus(atm.grid.nodes[0]) * 0.6 * expint(3, 2.0 * (1 - z))).epsilon(1e-6));
    }
  }
  SUBCASE("one optics table per channel") {
    const auto atm = fixture::grey_slab({});
    CHECK_THROWS(ground_boundary_condition(g, bd, atm, src, {}));
  }
}

TEST_CASE("problem setup") {
  const auto atm = fixture::grey_slab({.kappa = 1.0, .albedo = 0.2, .r = 0.3});
  const auto pr = make_problem(VoxelGrid({2, 2, 1}, {4, 4, 4}), atm, fixture::standard_sources(), 1.0);
  CHECK(pr.mirrors.size() == 4);
  CHECK(pr.boundary.size() == 32);
  CHECK(pr.kappa.rows() == 64);
  CHECK(pr.kappa.cols() == static_cast<Eigen::Index>(atm.n_freq()));
  CHECK(pr.albedo.minCoeff() == doctest::Approx(0.2));
  CHECK(pr.Q.rows() == 32);
  CHECK(make_problem(VoxelGrid({2, 2, 1}, {4, 4, 4}), atm, fixture::standard_sources(), 0.0).mirrors.empty());

  CHECK_THROWS(make_problem(VoxelGrid({2, 2, 2}, {4, 4, 4}), atm, fixture::standard_sources(), 1.0));
  CHECK_THROWS(make_problem(VoxelGrid({2, 2, 1}, {4, 4, 4}), fixture::grey_slab({.panels = 4, .nodes_per_panel = 4}),
                            fixture::standard_sources(), 1.0));

  // identical grey channels share one operator set
  const auto sets = assemble_operators(pr, dense_opts());
  REQUIRE(sets.size() == 1);
  CHECK(sets[0].channels.size() == atm.n_freq());
  CHECK(sets[0].reflected.empty());
  OperatorOptions split = dense_opts();
  split.fold_mirrors = false;
  CHECK(assemble_operators(pr, split)[0].reflected.size() == 4);
}

TEST_CASE("3D solve") {
  const VoxelGrid g({2, 2, 1}, {6, 6, 6});

  SUBCASE("zero sources") {
    const auto pr = make_problem(g, fixture::grey_slab({.kappa = 1.0, .albedo = 0.3}), BoundarySources{}, 1.0);
    const auto r = solve3d(pr, assemble_operators(pr, dense_opts()));
    CHECK(r.report.converged);
    CHECK(r.report.iterations == 1);
    CHECK(r.state.J.cwiseAbs().maxCoeff() == 0.0);
    CHECK(r.state.T.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("monotone convergence with mirrors") {
    const auto pr =
        make_problem(g, fixture::grey_slab({.kappa = 1.0, .albedo = 0.3, .r = 0.3}), fixture::standard_sources(), 1.0);
    const auto ops = assemble_operators(pr);
    const auto r = solve3d(pr, ops, {.tol = 1e-10});
    REQUIRE(r.report.converged);
    CHECK(r.report.monotonicity_violations == 0);
    CHECK(r.report.closure_residual <= 1e-8);
    CHECK(r.state.J.minCoeff() > 0.0);
    const auto& K = r.state.K;
    const Eigen::MatrixXd mag = (K[0].array().square() + K[1].array().square() + K[2].array().square()).sqrt().matrix();
    CHECK((mag - r.state.J).maxCoeff() <= 1e-12 * r.state.J.maxCoeff());
    // horizontally homogeneous with perfect walls: a column is uniform in x, y
    const long a = g.active_index(0, 0, 3), b = g.active_index(3, 2, 3);
    CHECK(r.state.T(a) == doctest::Approx(r.state.T(b)).epsilon(0.02));
    // net flux is upward near the ground at night-free conditions
    CHECK(r.state.T.maxCoeff() > 0.0);
  }
  SUBCASE("anisotropic scattering needs dipole operators") {
    auto atm = fixture::grey_slab({.kappa = 1.0, .albedo = 0.5});
    atm.beta.setConstant(0.3);
    const auto pr = make_problem(g, atm, fixture::standard_sources(), 0.0);
    OperatorOptions o = dense_opts();
    o.with_dipole = false;
    const auto ops = assemble_operators(pr, o);
    REQUIRE_FALSE(ops[0].volume.Gww[0].empty());
    const auto r = solve3d(pr, ops, {.tol = 1e-9});
    CHECK(r.report.converged);
    CHECK(r.report.monotonicity_violations == 0);

    auto plain = assemble_operators(make_problem(g, fixture::grey_slab({.kappa = 1.0, .albedo = 0.5}),
                                                 fixture::standard_sources(), 0.0),
                                    o);
    CHECK_THROWS(solve3d(pr, plain));
  }
  SUBCASE("argument checks") {
    const auto pr = make_problem(g, fixture::grey_slab({}), fixture::standard_sources(), 0.0);
    const auto ops = assemble_operators(pr, dense_opts());
    CHECK_THROWS(solve3d(pr, ops, {.tol = 0.0}));
    const auto other = make_problem(VoxelGrid({2, 2, 1}, {4, 4, 4}), fixture::grey_slab({}), fixture::standard_sources(), 0.0);
    CHECK_THROWS(solve3d(other, ops));
  }
}

TEST_CASE("3D output files") {
  const VoxelGrid g({4, 4, 1}, {8, 8, 6}, Terrain::valley(4, 4, 0.4));
  const auto pr = make_problem(g, fixture::grey_slab({.kappa = 1.0}), fixture::standard_sources(), 1.0);
  const auto r = solve3d(pr, assemble_operators(pr), {.tol = 1e-6});
  const auto dir = std::filesystem::temp_directory_path();
  write_volume_csv(dir / "radslab_volume.csv", pr, r.state);
  write_ground_slice_csv(dir / "radslab_ground.csv", pr, r.state);
  const auto vol = csv::read(dir / "radslab_volume.csv");
  CHECK(vol.header == std::vector<std::string>{"x", "y", "z", "T", "Jtotal"});
  CHECK(vol.rows.size() == g.n_active());
  const auto ground = csv::read(dir / "radslab_ground.csv");
  CHECK(ground.rows.size() == 64);
  for (const auto& row : ground.rows) {
    CHECK(row[3] > 100.0);
    CHECK(row[3] < 400.0);
    CHECK(row[4] > 0.0);
  }
  std::filesystem::remove(dir / "radslab_volume.csv");
  std::filesystem::remove(dir / "radslab_ground.csv");
}
