#include "radslab/transport3d.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <atomic>
#include <map>
#include <numbers>
#include <stdexcept>

#include "radslab/csv.hpp"
#include "radslab/quadrature.hpp"
#include "radslab/specfun.hpp"

namespace radslab {

namespace {

constexpr double kInv4Pi = 0.25 / std::numbers::pi;

int gww_index(int a, int b) {
  static constexpr int map[3][3] = {{0, 1, 2}, {1, 3, 4}, {2, 4, 5}};
  return map[a][b];
}

}  // namespace

// ---------------------------------------------------------------- terrain

Terrain Terrain::flat() { return {}; }

Terrain Terrain::valley(double Lx, double Ly, double ridge_height) {
  if (!(Lx > 0) || !(Ly > 0) || ridge_height < 0) throw std::invalid_argument("Terrain::valley: bad dimensions");
  const double w = 0.15 * Lx;
  return {[=](double x, double y) {
    const double a = (x - 0.2 * Lx) / w, b = (x - 0.8 * Lx) / w;
    const double ridges = std::exp(-a * a) + std::exp(-b * b);
    return ridge_height * ridges * (1.0 - 0.3 * std::cos(2.0 * std::numbers::pi * y / Ly)) / 1.3;
  }};
}

Terrain Terrain::from_csv(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  const auto cx = t.column("x"), cy = t.column("y"), cg = t.column("g");
  std::vector<double> xs, ys;
  for (const auto& r : t.rows) {
    xs.push_back(r[cx]);
    ys.push_back(r[cy]);
  }
  auto uniq = [](std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  };
  uniq(xs);
  uniq(ys);
  if (xs.size() < 2 || ys.size() < 2 || xs.size() * ys.size() != t.rows.size())
    throw std::runtime_error("terrain: " + path.string() + " is not a complete rectangular lattice");
  std::vector<double> g(xs.size() * ys.size(), std::nan(""));
  for (const auto& r : t.rows) {
    const auto i = std::lower_bound(xs.begin(), xs.end(), r[cx]) - xs.begin();
    const auto j = std::lower_bound(ys.begin(), ys.end(), r[cy]) - ys.begin();
    if (r[cg] < 0) throw std::runtime_error("terrain: negative height in " + path.string());
    g[j * xs.size() + i] = r[cg];
  }
  if (std::any_of(g.begin(), g.end(), [](double v) { return std::isnan(v); }))
    throw std::runtime_error("terrain: duplicate lattice points in " + path.string());
  return {[xs, ys, g](double x, double y) {
    auto bracket = [](const std::vector<double>& v, double q, std::size_t& i, double& f) {
      q = std::clamp(q, v.front(), v.back());
      i = std::min<std::size_t>(std::upper_bound(v.begin(), v.end(), q) - v.begin() - 1, v.size() - 2);
      f = (q - v[i]) / (v[i + 1] - v[i]);
    };
    std::size_t i, j;
    double fx, fy;
    bracket(xs, x, i, fx);
    bracket(ys, y, j, fy);
    const std::size_t n = xs.size();
    return (1 - fx) * (1 - fy) * g[j * n + i] + fx * (1 - fy) * g[j * n + i + 1] + (1 - fx) * fy * g[(j + 1) * n + i] +
           fx * fy * g[(j + 1) * n + i + 1];
  }};
}

Eigen::Vector2d Terrain::gradient(double x, double y) const {
  if (is_flat()) return Eigen::Vector2d::Zero();
  const double e = 1e-5;
  return {((*this)(x + e, y) - (*this)(x - e, y)) / (2 * e), ((*this)(x, y + e) - (*this)(x, y - e)) / (2 * e)};
}

// ---------------------------------------------------------------- grid

VoxelGrid::VoxelGrid(Eigen::Vector3d extent, std::array<int, 3> res, Terrain terrain)
    : extent_(extent), res_(res), terrain_(std::move(terrain)) {
  for (int a = 0; a < 3; ++a) {
    if (res_[a] < 2) throw std::invalid_argument("VoxelGrid: resolution must be >= 2 per axis");
    if (!(extent_[a] > 0)) throw std::invalid_argument("VoxelGrid: extent must be positive");
  }
  h_ = extent_.cwiseQuotient(Eigen::Vector3d(res_[0], res_[1], res_[2]));
  index_.assign(n_cells(), -1);
  for (int k = 0; k < res_[2]; ++k)
    for (int j = 0; j < res_[1]; ++j)
      for (int i = 0; i < res_[0]; ++i) {
        const Eigen::Vector3d c = center(i, j, k);
        const double g = terrain_(c.x(), c.y());
        if (g < 0 || g >= extent_.z()) throw std::invalid_argument("VoxelGrid: terrain must lie in [0, H)");
        if (c.z() < g) continue;
        index_[(static_cast<std::size_t>(k) * res_[1] + j) * res_[0] + i] = static_cast<long>(centers_.size());
        centers_.push_back(c);
        cells_.push_back({i, j, k});
      }
  if (centers_.empty()) throw std::invalid_argument("VoxelGrid: terrain masks every cell");
}

Eigen::Vector3d VoxelGrid::center(int i, int j, int k) const {
  return {(i + 0.5) * h_.x(), (j + 0.5) * h_.y(), (k + 0.5) * h_.z()};
}

long VoxelGrid::active_index(int i, int j, int k) const {
  if (i < 0 || j < 0 || k < 0 || i >= res_[0] || j >= res_[1] || k >= res_[2]) return -1;
  return index_[(static_cast<std::size_t>(k) * res_[1] + j) * res_[0] + i];
}

bool VoxelGrid::masked(int i, int j, int k) const { return active_index(i, j, k) < 0; }

BoundingBox VoxelGrid::cell_box(std::size_t active) const {
  BoundingBox b;
  b.lo = centers_[active] - 0.5 * h_;
  b.hi = centers_[active] + 0.5 * h_;
  return b;
}

std::optional<std::array<int, 3>> VoxelGrid::locate(const Eigen::Vector3d& p) const {
  std::array<int, 3> c{};
  for (int a = 0; a < 3; ++a) {
    if (p[a] < 0 || p[a] > extent_[a]) return std::nullopt;
    c[a] = std::min(static_cast<int>(p[a] / h_[a]), res_[a] - 1);
  }
  return c;
}

namespace {

/// Parameters in [0, 1] where [x, y] crosses voxel faces, with both ends.
std::vector<double> crossings(const Eigen::Vector3d& x, const Eigen::Vector3d& y, const Eigen::Vector3d& h) {
  std::vector<double> t{0.0, 1.0};
  for (int a = 0; a < 3; ++a) {
    const double d = y[a] - x[a];
    if (d == 0.0) continue;
    const double lo = std::min(x[a], y[a]), hi = std::max(x[a], y[a]);
    for (double f = std::floor(lo / h[a]) + 1; f * h[a] < hi; ++f) t.push_back((f * h[a] - x[a]) / d);
  }
  std::sort(t.begin(), t.end());
  return t;
}

}  // namespace

double line_attenuation(const Eigen::Vector3d& x, const Eigen::Vector3d& y, const VoxelGrid& grid,
                        const std::function<double(const Eigen::Vector3d&)>& kappa) {
  const double L = (y - x).norm();
  if (L == 0.0) return 0.0;
  const auto t = crossings(x, y, grid.spacing());
  double sum = 0.0;
  for (std::size_t s = 0; s + 1 < t.size(); ++s) {
    const double dt = t[s + 1] - t[s];
    if (dt <= 0) continue;
    sum += kappa(x + 0.5 * (t[s] + t[s + 1]) * (y - x)) * dt * L;
  }
  return sum;
}

bool segment_visible(const Eigen::Vector3d& x, const Eigen::Vector3d& y, const VoxelGrid& grid) {
  if (grid.terrain().is_flat()) return true;
  const auto t = crossings(x, y, grid.spacing());
  for (std::size_t s = 0; s + 1 < t.size(); ++s) {
    if (t[s + 1] - t[s] <= 1e-12) continue;
    const Eigen::Vector3d m = x + 0.5 * (t[s] + t[s + 1]) * (y - x);
    if (m.z() < grid.terrain()(m.x(), m.y())) return false;
    const auto c = grid.locate(m);
    if (c && grid.masked((*c)[0], (*c)[1], (*c)[2])) return false;
  }
  return true;
}

// ---------------------------------------------------------------- optics

ColumnOptics::ColumnOptics(const AtmosphereModel& atm, std::size_t p, int n) {
  if (p >= atm.n_freq()) throw std::out_of_range("ColumnOptics: channel out of range");
  if (n < 2) throw std::invalid_argument("ColumnOptics: table too small");
  const auto& col = atm.column;
  const auto& tn = col.tau_nodes();
  z_top_ = col.z_top();
  dz_ = z_top_ / n;
  // Optical depth at the tau nodes, exact for kappa linear in tau.
  std::vector<double> X(tn.size(), 0.0);
  for (std::size_t k = 1; k < tn.size(); ++k)
    X[k] = X[k - 1] + 0.5 * (atm.kappa(p, k - 1) + atm.kappa(p, k)) * (tn[k] - tn[k - 1]);
  for (int i = 0; i <= n; ++i) {
    const double z = std::min(i * dz_, z_top_);
    const double tau = col.tau_of_z(z);
    std::size_t k = std::upper_bound(tn.begin(), tn.end(), tau) - tn.begin();
    k = std::clamp<std::size_t>(k, 1, tn.size() - 1) - 1;
    const double h = tn[k + 1] - tn[k];
    const double s = std::clamp(tau - tn[k], 0.0, h);
    const double f = s / h;
    const double k0 = atm.kappa(p, k), k1 = atm.kappa(p, k + 1);
    kappa_.push_back(((1 - f) * k0 + f * k1) * col.density().rho(z));
    albedo_.push_back((1 - f) * atm.albedo(p, k) + f * atm.albedo(p, k + 1));
    beta_.push_back((1 - f) * atm.beta(p, k) + f * atm.beta(p, k + 1));
    depth_.push_back(X[k] + k0 * s + 0.5 * (k1 - k0) * s * s / h);
  }
}

ColumnOptics ColumnOptics::uniform(double kappa, double z_top) {
  if (kappa < 0 || !(z_top > 0)) throw std::invalid_argument("ColumnOptics::uniform: bad arguments");
  ColumnOptics o;
  o.z_top_ = z_top;
  o.dz_ = z_top;
  o.kappa_ = {kappa, kappa};
  o.albedo_ = {0.0, 0.0};
  o.beta_ = {0.0, 0.0};
  o.depth_ = {0.0, kappa * z_top};
  return o;
}

double ColumnOptics::lookup(const std::vector<double>& t, double z) const {
  const double s = std::clamp(z, 0.0, z_top_) / dz_;
  const auto i = std::min(static_cast<std::size_t>(s), t.size() - 2);
  const double f = s - static_cast<double>(i);
  return (1 - f) * t[i] + f * t[i + 1];
}

double ColumnOptics::kappa(double z) const { return lookup(kappa_, z); }
double ColumnOptics::albedo(double z) const { return lookup(albedo_, z); }
double ColumnOptics::beta(double z) const { return lookup(beta_, z); }
double ColumnOptics::depth(double z) const { return lookup(depth_, z); }

double ColumnOptics::attenuation(const Eigen::Vector3d& x, const Eigen::Vector3d& y) const {
  const double L = (y - x).norm();
  const double dz = y.z() - x.z();
  if (std::abs(dz) <= 1e-9 * L) return kappa(0.5 * (x.z() + y.z())) * L;
  return L * std::abs(depth(y.z()) - depth(x.z())) / std::abs(dz);
}

// ---------------------------------------------------------------- mirrors

Eigen::Vector3d ReflectivePlane::mirror(const Eigen::Vector3d& p) const {
  Eigen::Vector3d q = p;
  q[axis] = 2 * position - p[axis];
  return q;
}

BoundingBox ReflectivePlane::mirror(const BoundingBox& b) const {
  BoundingBox m = b;
  m.lo[axis] = 2 * position - b.hi[axis];
  m.hi[axis] = 2 * position - b.lo[axis];
  return m;
}

std::vector<ReflectivePlane> side_walls(const VoxelGrid& grid, double R) {
  if (R < 0 || R > 1) throw std::invalid_argument("side_walls: reflectivity must be in [0, 1]");
  return {{0, 0.0, R}, {0, grid.extent().x(), R}, {1, 0.0, R}, {1, grid.extent().y(), R}};
}

namespace {

/// Visibility of x from y via the mirror: x -> x' -> y with x' on the plane.
bool path_visible(const Eigen::Vector3d& x, const Eigen::Vector3d& y, const VoxelGrid& grid,
                  const ReflectivePlane* mirror) {
  if (grid.terrain().is_flat()) return true;
  if (!mirror) return segment_visible(x, y, grid);
  const Eigen::Vector3d ys = mirror->mirror(y);
  const double d = ys[mirror->axis] - x[mirror->axis];
  if (d == 0.0) return false;
  const double t = (mirror->position - x[mirror->axis]) / d;
  const Eigen::Vector3d xp = x + t * (ys - x);
  return segment_visible(x, xp, grid) && segment_visible(xp, y, grid);
}

}  // namespace

// ---------------------------------------------------------------- boundary

std::vector<BoundaryPatch> make_boundary(const VoxelGrid& grid) {
  std::vector<BoundaryPatch> out;
  const auto& h = grid.spacing();
  const auto& n = grid.resolution();
  const double H = grid.extent().z();
  for (int j = 0; j < n[1]; ++j)
    for (int i = 0; i < n[0]; ++i) {
      const double u0 = i * h.x(), u1 = u0 + h.x(), v0 = j * h.y(), v1 = v0 + h.y();
      const double uc = 0.5 * (u0 + u1), vc = 0.5 * (v0 + v1);
      const Eigen::Vector2d gr = grid.terrain().gradient(uc, vc);
      const Eigen::Vector3d N(gr.x(), gr.y(), -1.0);
      out.push_back({BoundaryPatch::Kind::ground, u0, u1, v0, v1, Eigen::Vector3d(uc, vc, grid.terrain()(uc, vc)),
                     N.normalized(), N.norm() * h.x() * h.y()});
    }
  for (int j = 0; j < n[1]; ++j)
    for (int i = 0; i < n[0]; ++i) {
      const double u0 = i * h.x(), u1 = u0 + h.x(), v0 = j * h.y(), v1 = v0 + h.y();
      out.push_back({BoundaryPatch::Kind::top, u0, u1, v0, v1, Eigen::Vector3d(0.5 * (u0 + u1), 0.5 * (v0 + v1), H),
                     Eigen::Vector3d::UnitZ(), h.x() * h.y()});
    }
  return out;
}

// ---------------------------------------------------------------- kernels

namespace {

const QuadratureRule& gl(int n) {
  static const QuadratureRule g3 = gauss_legendre(3, 0.0, 1.0);
  static const QuadratureRule g16 = gauss_legendre(16, 0.0, 1.0);
  if (n != 3 && n != 16) throw std::invalid_argument("gl: unsupported order");
  return n == 3 ? g3 : g16;
}

void add_point(KernelValues& out, const Eigen::Vector3d& d, double weight) {
  const double r = d.norm();
  const Eigen::Vector3d w = d / r;
  const double g = weight;
  out[0] += g;
  for (int a = 0; a < 3; ++a) out[1 + a] += g * w[a];
  out[4] += g * w.x() * w.x();
  out[5] += g * w.x() * w.y();
  out[6] += g * w.x() * w.z();
  out[7] += g * w.y() * w.y();
  out[8] += g * w.y() * w.z();
  out[9] += g * w.z() * w.z();
}

/// Adaptive tensor Gauss rule over the box [lo, hi]. For a mirrored source
/// box the straight path to the image has the length and end heights of the
/// reflected path, so the stratified attenuation is unchanged.
void volume_accumulate(const Eigen::Vector3d& x, const Eigen::Vector3d& lo, const Eigen::Vector3d& hi,
                       const ColumnOptics& optics, KernelValues& out, int depth) {
  const Eigen::Vector3d h = hi - lo;
  const Eigen::Vector3d c = 0.5 * (lo + hi);
  const double r = (x - c).norm();
  auto point = [&](const Eigen::Vector3d& y, double w) {
    const Eigen::Vector3d d = x - y;
    const double r2 = d.squaredNorm();
    add_point(out, d, w * kInv4Pi * std::exp(-optics.attenuation(x, y)) / r2);
  };
  std::array<int, 3> split{1, 1, 1};
  bool any = false;
  if (depth < 24)
    for (int a = 0; a < 3; ++a)
      if (h[a] > 0.25 * r) {
        split[a] = 2;
        any = true;
      }
  if (!any) {
    const auto& g = gl(3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) {
          const Eigen::Vector3d y = lo + Eigen::Vector3d(g.nodes[i] * h.x(), g.nodes[j] * h.y(), g.nodes[k] * h.z());
          point(y, g.weights[i] * g.weights[j] * g.weights[k] * h.prod());
        }
    return;
  }
  const Eigen::Vector3d sh(h.x() / split[0], h.y() / split[1], h.z() / split[2]);
  for (int i = 0; i < split[0]; ++i)
    for (int j = 0; j < split[1]; ++j)
      for (int k = 0; k < split[2]; ++k) {
        const Eigen::Vector3d l = lo + Eigen::Vector3d(i * sh.x(), j * sh.y(), k * sh.z());
        volume_accumulate(x, l, l + sh, optics, out, depth + 1);
      }
}

}  // namespace

KernelValues self_kernel(const Eigen::Vector3d& h, double kappa) {
  KernelValues out{};
  const auto& g = gl(16);
  for (int a = 0; a < 3; ++a) {
    const int b = (a + 1) % 3, c = (a + 2) % 3;
    const double d = 0.5 * h[a], eb = 0.5 * h[b], ec = 0.5 * h[c];
    // Four triangles from the foot point to the face edges: (edge distance, axis
    // direction angle, angular half-range limits).
    struct Tri {
      double dist;
      double phi0;
      double lo, hi;
    };
    const Tri tris[4] = {{eb, 0.0, -std::atan2(ec, eb), std::atan2(ec, eb)},
                         {ec, 0.5 * std::numbers::pi, -std::atan2(eb, ec), std::atan2(eb, ec)},
                         {eb, std::numbers::pi, -std::atan2(ec, eb), std::atan2(ec, eb)},
                         {ec, 1.5 * std::numbers::pi, -std::atan2(eb, ec), std::atan2(eb, ec)}};
    for (double sgn : {-1.0, 1.0})
      for (const auto& t : tris)
        for (std::size_t q = 0; q < g.nodes.size(); ++q) {
          const double psi = t.lo + g.nodes[q] * (t.hi - t.lo);
          const double wpsi = g.weights[q] * (t.hi - t.lo);
          const double phi = t.phi0 + psi;
          const double rho_max = t.dist / std::cos(psi);
          const double smax = std::log(std::hypot(d, rho_max) / d);
          for (std::size_t s = 0; s < g.nodes.size(); ++s) {
            // r = d e^sigma makes the radial integrand d f(r)/r^2 dr smooth.
            const double sigma = g.nodes[s] * smax;
            const double r = d * std::exp(sigma);
            const double kr = kappa * r;
            const double f = kr < 1e-8 ? r * (1 - 0.5 * kr) : -std::expm1(-kr) / kappa;
            const double weight = kInv4Pi * wpsi * g.weights[s] * smax * f * d / r;
            const double rho = std::sqrt(std::max(r * r - d * d, 0.0));
            Eigen::Vector3d w;
            w[a] = sgn * d / r;
            w[b] = rho * std::cos(phi) / r;
            w[c] = rho * std::sin(phi) / r;
            add_point(out, w * r, weight);
          }
        }
  }
  return out;
}

KernelValues volume_kernel(const Eigen::Vector3d& x, const BoundingBox& cell, const ColumnOptics& optics) {
  if (cell.contains(x)) {
    const Eigen::Vector3d h = cell.hi - cell.lo;
    const Eigen::Vector3d c = 0.5 * (cell.lo + cell.hi);
    if ((x - c).norm() > 1e-9 * h.norm())
      throw std::invalid_argument("volume_kernel: collocation point must be the cell centre");
    return self_kernel(h, optics.kappa(x.z()));
  }
  KernelValues out{};
  volume_accumulate(x, cell.lo, cell.hi, optics, out, 0);
  return out;
}

namespace {

struct SurfaceGeometry {
  const BoundaryPatch& patch;
  const VoxelGrid& grid;
  const ReflectivePlane* mirror;

  /// Point and unnormalized outward normal (area element |N| du dv), both mirrored if needed.
  std::pair<Eigen::Vector3d, Eigen::Vector3d> at(double u, double v) const {
    Eigen::Vector3d y, N;
    if (patch.kind == BoundaryPatch::Kind::top) {
      y = {u, v, grid.extent().z()};
      N = Eigen::Vector3d::UnitZ();
    } else {
      const Eigen::Vector2d g = grid.terrain().gradient(u, v);
      y = {u, v, grid.terrain()(u, v)};
      N = {g.x(), g.y(), -1.0};
    }
    if (mirror) {
      const Eigen::Vector3d ys = mirror->mirror(y);
      N[mirror->axis] = -N[mirror->axis];
      y = ys;
    }
    return {y, N};
  }
};

void surface_accumulate(const Eigen::Vector3d& x, const SurfaceGeometry& geo, const ColumnOptics& optics, double u0,
                        double u1, double v0, double v1, KernelValues& out, int depth) {
  auto point = [&](double u, double v, double w) {
    const auto [y, N] = geo.at(u, v);
    const Eigen::Vector3d d = x - y;
    const double r2 = d.squaredNorm();
    if (r2 < 1e-24) throw std::invalid_argument("surface_kernel: target lies on the boundary");
    const double dn = d.dot(N);
    if (dn >= 0) return;  // outgoing direction: no boundary emission
    if (!geo.grid.terrain().is_flat()) {
      const Eigen::Vector3d y_real = geo.mirror ? geo.mirror->mirror(y) : y;
      if (!path_visible(x, y_real, geo.grid, geo.mirror)) return;
    }
    add_point(out, d, w * kInv4Pi * dn * dn / (r2 * r2 * N.norm()) * std::exp(-optics.attenuation(x, y)));
  };
  const double uc = 0.5 * (u0 + u1), vc = 0.5 * (v0 + v1);
  const auto [yc, Nc] = geo.at(uc, vc);
  const double r = (x - yc).norm();
  const double size = std::max(u1 - u0, v1 - v0) * Nc.norm();
  if (r < 1e-12) throw std::invalid_argument("surface_kernel: target lies on the boundary");
  const double area = (u1 - u0) * (v1 - v0);
  if (size <= 0.25 * r || depth >= 16) {
    const auto& g = gl(3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        point(u0 + g.nodes[i] * (u1 - u0), v0 + g.nodes[j] * (v1 - v0), g.weights[i] * g.weights[j] * area);
    return;
  }
  const double um = uc, vm = vc;
  surface_accumulate(x, geo, optics, u0, um, v0, vm, out, depth + 1);
  surface_accumulate(x, geo, optics, um, u1, v0, vm, out, depth + 1);
  surface_accumulate(x, geo, optics, u0, um, vm, v1, out, depth + 1);
  surface_accumulate(x, geo, optics, um, u1, vm, v1, out, depth + 1);
}

}  // namespace

KernelValues surface_kernel(const Eigen::Vector3d& x, const BoundaryPatch& patch, const VoxelGrid& grid,
                            const ColumnOptics& optics, const ReflectivePlane* mirror) {
  KernelValues out{};
  SurfaceGeometry geo{patch, grid, mirror};
  surface_accumulate(x, geo, optics, patch.u0, patch.u1, patch.v0, patch.v1, out, 0);
  return out;
}

// ---------------------------------------------------------------- operators

Eigen::Index KernelOperator::rows() const {
  if (const auto* d = std::get_if<Eigen::MatrixXd>(&rep_)) return d->rows();
  if (const auto* h = std::get_if<std::shared_ptr<const HMatrix>>(&rep_)) return (*h)->rows();
  return 0;
}

Eigen::Index KernelOperator::cols() const {
  if (const auto* d = std::get_if<Eigen::MatrixXd>(&rep_)) return d->cols();
  if (const auto* h = std::get_if<std::shared_ptr<const HMatrix>>(&rep_)) return (*h)->cols();
  return 0;
}

Eigen::MatrixXd KernelOperator::apply(const Eigen::MatrixXd& X) const {
  if (const auto* d = std::get_if<Eigen::MatrixXd>(&rep_)) return (*d) * X;
  if (const auto* h = std::get_if<std::shared_ptr<const HMatrix>>(&rep_)) return (*h)->matvec(X);
  throw std::logic_error("KernelOperator: empty operator");
}

std::size_t KernelOperator::stored_entries() const {
  if (const auto* d = std::get_if<Eigen::MatrixXd>(&rep_)) return static_cast<std::size_t>(d->size());
  if (const auto* h = std::get_if<std::shared_ptr<const HMatrix>>(&rep_)) return (*h)->stored_entries();
  return 0;
}

Eigen::MatrixXd KernelOperator::to_dense() const {
  if (const auto* d = std::get_if<Eigen::MatrixXd>(&rep_)) return *d;
  if (const auto* h = std::get_if<std::shared_ptr<const HMatrix>>(&rep_)) return (*h)->to_dense();
  return {};
}

const HMatrix* KernelOperator::hmatrix() const {
  if (const auto* h = std::get_if<std::shared_ptr<const HMatrix>>(&rep_)) return h->get();
  return nullptr;
}

namespace {

using ComponentFn = std::function<KernelValues(std::size_t, std::size_t)>;

/// Kernel values on a flat-ground lattice depend only on the horizontal cell
/// offset and the two layer indices. Entries are computed on first use for
/// nonnegative offsets and mapped to other signs by symmetry.
class LatticeCache {
 public:
  using Compute = std::function<KernelValues(int adx, int ady, int kt, int ks)>;

  LatticeCache(int max_dx, int max_dy, int n_target, int n_source, int ncomp, Compute compute)
      : nx_(max_dx), ny_(max_dy), nt_(n_target), ns_(n_source), ncomp_(ncomp), compute_(std::move(compute)),
        values_(static_cast<std::size_t>(nx_) * ny_ * nt_ * ns_ * ncomp_),
        state_(static_cast<std::size_t>(nx_) * ny_ * nt_ * ns_) {}

  KernelValues get(int dx, int dy, int kt, int ks) {
    const int adx = std::abs(dx), ady = std::abs(dy);
    if (adx >= nx_ || ady >= ny_) throw std::out_of_range("lattice cache: offset out of range");
    const std::size_t slot = ((static_cast<std::size_t>(adx) * ny_ + ady) * nt_ + kt) * ns_ + ks;
    double* v = values_.data() + slot * ncomp_;
    if (state_[slot].load(std::memory_order_acquire) == 0) {
      const KernelValues k = compute_(adx, ady, kt, ks);
      std::copy(k.begin(), k.begin() + ncomp_, v);
      state_[slot].store(1, std::memory_order_release);
    }
    KernelValues out{};
    std::copy(v, v + ncomp_, out.begin());
    const double sx = dx < 0 ? -1.0 : 1.0, sy = dy < 0 ? -1.0 : 1.0;
    out[1] *= sx;
    out[2] *= sy;
    out[5] *= sx * sy;
    out[6] *= sx;
    out[8] *= sy;
    return out;
  }

 private:
  int nx_, ny_, nt_, ns_, ncomp_;
  Compute compute_;
  std::vector<double> values_;
  std::vector<std::atomic<unsigned char>> state_;
};

int lattice_offset(double d, double h) { return static_cast<int>(std::lround(d / h)); }

/// Source images contributing to one operator: the direct source and/or
/// mirror images, each weighted by its plane's reflectivity.
struct ImageSet {
  bool direct = true;
  std::vector<const ReflectivePlane*> planes;

  bool empty() const {
    if (direct) return false;
    for (const auto* p : planes)
      if (p->R != 0.0) return false;
    return true;
  }
};

/// Builds one operator per requested kernel component. Cluster boxes are
/// padded by the element half sizes so admissibility sees the true supports,
/// and a block is admissible only if it is so for every source image.
struct Assembler {
  const OperatorOptions& opts;
  std::shared_ptr<const ClusterTree> rows;
  std::shared_ptr<const ClusterTree> cols;
  Eigen::Vector3d row_pad;
  Eigen::Vector3d col_pad;
  std::size_t n_rows, n_cols;
  ImageSet images;

  KernelOperator build(const ComponentFn& fn, int component) const {
    if (!opts.hierarchical) {
      Eigen::MatrixXd D(n_rows, n_cols);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
      for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n_rows); ++i)
        for (std::size_t j = 0; j < n_cols; ++j) D(i, j) = fn(i, j)[component];
      return KernelOperator(std::move(D));
    }
    HMatrixOptions ho;
    ho.eps = opts.eps;
    ho.eta = opts.eta;
    const double eta = opts.eta;
    const Eigen::Vector3d rp = row_pad, cp = col_pad;
    const ImageSet im = images;
    ho.admissible = [eta, rp, cp, im](const BoundingBox& r, const BoundingBox& c) {
      BoundingBox a = r, b = c;
      a.lo -= rp;
      a.hi += rp;
      b.lo -= cp;
      b.hi += cp;
      auto ok = [&](const BoundingBox& s) {
        const double dist = a.distance(s);
        return dist > 0 && std::min(a.diameter(), s.diameter()) <= eta * dist;
      };
      if (im.direct && !ok(b)) return false;
      for (const auto* p : im.planes)
        if (p->R != 0.0 && !ok(p->mirror(b))) return false;
      return true;
    };
    return KernelOperator(std::make_shared<const HMatrix>(
        rows, cols, [&fn, component](std::size_t i, std::size_t j) { return fn(i, j)[component]; }, ho));
  }
};

std::shared_ptr<const ClusterTree> tree_of(std::vector<Eigen::Vector3d> pts, const OperatorOptions& opts) {
  return std::make_shared<const ClusterTree>(std::move(pts), opts.leaf_size);
}

void add_scaled(KernelValues& acc, const KernelValues& v, double w, int ncomp) {
  for (int c = 0; c < ncomp; ++c) acc[c] += w * v[c];
}

VolumeOps volume_ops_impl(const VoxelGrid& grid, const ColumnOptics& optics, const OperatorOptions& opts,
                          const ImageSet& images) {
  VolumeOps ops;
  if (images.empty()) return ops;
  const auto& centers = grid.active_centers();
  const std::size_t N = centers.size();
  const Eigen::Vector3d pad = 0.5 * grid.spacing();
  Assembler as{opts, tree_of(centers, opts), tree_of(centers, opts), pad, pad, N, N, images};

  const int ncomp = opts.with_dipole ? 10 : 4;
  std::shared_ptr<LatticeCache> cache;
  const auto& h = grid.spacing();
  const auto& res = grid.resolution();
  if (grid.terrain().is_flat()) {
    cache = std::make_shared<LatticeCache>(
        2 * res[0], 2 * res[1], res[2], res[2], ncomp, [&optics, h](int adx, int ady, int kt, int ks) {
          const Eigen::Vector3d x(adx * h.x(), ady * h.y(), (kt + 0.5) * h.z());
          BoundingBox b;
          b.lo = Eigen::Vector3d(-0.5 * h.x(), -0.5 * h.y(), ks * h.z());
          b.hi = Eigen::Vector3d(0.5 * h.x(), 0.5 * h.y(), (ks + 1) * h.z());
          return volume_kernel(x, b, optics);
        });
  }

  auto one = [&](std::size_t i, std::size_t j, const ReflectivePlane* mirror) -> KernelValues {
    const Eigen::Vector3d& x = centers[i];
    if (cache) {
      const Eigen::Vector3d d = x - (mirror ? mirror->mirror(centers[j]) : centers[j]);
      return cache->get(lattice_offset(d.x(), h.x()), lattice_offset(d.y(), h.y()), grid.cell_of(i)[2],
                        grid.cell_of(j)[2]);
    }
    if (!mirror) {
      if (i != j && !segment_visible(x, centers[j], grid)) return {};
      return volume_kernel(x, grid.cell_box(j), optics);
    }
    if (!path_visible(x, centers[j], grid, mirror)) return {};
    KernelValues v{};
    const BoundingBox b = mirror->mirror(grid.cell_box(j));
    volume_accumulate(x, b.lo, b.hi, optics, v, 0);
    return v;
  };
  ComponentFn fn = [&](std::size_t i, std::size_t j) -> KernelValues {
    KernelValues v{};
    if (images.direct) v = one(i, j, nullptr);
    for (const auto* p : images.planes)
      if (p->R != 0.0) add_scaled(v, one(i, j, p), p->R, ncomp);
    return v;
  };

  ops.G = as.build(fn, 0);
  if (opts.with_flux || opts.with_dipole)
    for (int a = 0; a < 3; ++a) ops.Gw[a] = as.build(fn, 1 + a);
  if (opts.with_dipole)
    for (int c = 0; c < 6; ++c) ops.Gww[c] = as.build(fn, 4 + c);
  return ops;
}

SurfaceOps surface_ops_impl(const VoxelGrid& grid, const std::vector<BoundaryPatch>& boundary,
                            const ColumnOptics& optics, const OperatorOptions& opts, const ImageSet& images) {
  SurfaceOps ops;
  if (images.empty() || boundary.empty()) return ops;
  const auto& centers = grid.active_centers();
  std::vector<Eigen::Vector3d> pc;
  for (const auto& p : boundary) pc.push_back(p.center);
  const auto& h = grid.spacing();
  double relief = 0.0;
  for (const auto& p : boundary)
    if (p.kind == BoundaryPatch::Kind::ground) relief = std::max(relief, std::abs(p.normal.z()) < 1 ? h.x() + h.y() : 0.0);
  Assembler as{opts,
               tree_of(centers, opts),
               tree_of(pc, opts),
               0.5 * h,
               Eigen::Vector3d(0.5 * h.x(), 0.5 * h.y(), relief),
               centers.size(),
               boundary.size(),
               images};
  std::shared_ptr<LatticeCache> cache;
  const auto& res = grid.resolution();
  if (grid.terrain().is_flat()) {
    const Eigen::Vector3d hh = h;
    cache = std::make_shared<LatticeCache>(
        2 * res[0], 2 * res[1], res[2], 2, 4, [&grid, &optics, hh](int adx, int ady, int kt, int kind) {
          const Eigen::Vector3d x(adx * hh.x(), ady * hh.y(), (kt + 0.5) * hh.z());
          const bool top = kind == 1;
          const BoundaryPatch patch{top ? BoundaryPatch::Kind::top : BoundaryPatch::Kind::ground,
                                    -0.5 * hh.x(),
                                    0.5 * hh.x(),
                                    -0.5 * hh.y(),
                                    0.5 * hh.y(),
                                    Eigen::Vector3d(0, 0, top ? grid.extent().z() : 0.0),
                                    top ? Eigen::Vector3d::UnitZ() : Eigen::Vector3d(-Eigen::Vector3d::UnitZ()),
                                    hh.x() * hh.y()};
          return surface_kernel(x, patch, grid, optics, nullptr);
        });
  }
  auto one = [&](std::size_t i, std::size_t j, const ReflectivePlane* mirror) -> KernelValues {
    if (cache) {
      const Eigen::Vector3d d = centers[i] - (mirror ? mirror->mirror(pc[j]) : pc[j]);
      return cache->get(lattice_offset(d.x(), h.x()), lattice_offset(d.y(), h.y()), grid.cell_of(i)[2],
                        boundary[j].kind == BoundaryPatch::Kind::top ? 1 : 0);
    }
    return surface_kernel(centers[i], boundary[j], grid, optics, mirror);
  };
  ComponentFn fn = [&](std::size_t i, std::size_t j) -> KernelValues {
    KernelValues v{};
    if (images.direct) v = one(i, j, nullptr);
    for (const auto* p : images.planes)
      if (p->R != 0.0) add_scaled(v, one(i, j, p), p->R, 4);
    return v;
  };
  ops.G = as.build(fn, 0);
  if (opts.with_flux || opts.with_dipole)
    for (int a = 0; a < 3; ++a) ops.Gw[a] = as.build(fn, 1 + a);
  return ops;
}

void check_planes(const std::vector<ReflectivePlane>& planes) {
  for (const auto& pl : planes) {
    if (pl.axis < 0 || pl.axis > 1) throw std::invalid_argument("reflective planes must be vertical (axis 0 or 1)");
    if (pl.R < 0 || pl.R > 1) throw std::invalid_argument("reflectivity outside [0, 1]");
  }
}

}  // namespace

VolumeOps assemble_volume_ops(const VoxelGrid& grid, const ColumnOptics& optics, const OperatorOptions& opts) {
  return volume_ops_impl(grid, optics, opts, ImageSet{});
}

SurfaceOps assemble_surface_ops(const VoxelGrid& grid, const std::vector<BoundaryPatch>& boundary,
                                const ColumnOptics& optics, const OperatorOptions& opts) {
  return surface_ops_impl(grid, boundary, optics, opts, ImageSet{});
}

std::vector<ReflectedOps> assemble_reflected_ops(const VoxelGrid& grid, const std::vector<ReflectivePlane>& planes,
                                                 const std::vector<BoundaryPatch>& boundary,
                                                 const ColumnOptics& optics, const OperatorOptions& opts) {
  check_planes(planes);
  std::vector<ReflectedOps> out;
  for (const auto& pl : planes) {
    const ImageSet im{false, {&pl}};
    out.push_back({pl, volume_ops_impl(grid, optics, opts, im), surface_ops_impl(grid, boundary, optics, opts, im)});
  }
  return out;
}

FoldedOps assemble_folded_ops(const VoxelGrid& grid, const std::vector<ReflectivePlane>& planes,
                              const std::vector<BoundaryPatch>& boundary, const ColumnOptics& optics,
                              const OperatorOptions& opts) {
  if (opts.with_dipole) throw std::invalid_argument("assemble_folded_ops: dipole kernels cannot be folded");
  check_planes(planes);
  ImageSet im{true, {}};
  for (const auto& p : planes) im.planes.push_back(&p);
  return {volume_ops_impl(grid, optics, opts, im), surface_ops_impl(grid, boundary, optics, opts, im)};
}

// ---------------------------------------------------------------- problem

Eigen::MatrixXd ground_boundary_condition(const VoxelGrid& grid, const std::vector<BoundaryPatch>& boundary,
                                          const AtmosphereModel& atm, const BoundarySources& src,
                                          const std::vector<ColumnOptics>& optics) {
  src.validate();
  const auto P = atm.n_freq();
  if (optics.size() != P) throw std::invalid_argument("ground_boundary_condition: one optics table per channel");
  Eigen::MatrixXd Q(boundary.size(), P);
  for (std::size_t p = 0; p < P; ++p) {
    const double nu = atm.grid.nodes[p];
    const double qe = src.q_plus(nu), qs = src.q_minus(nu);
    const double r = atm.r_ground(p);
    const double top_depth = optics[p].depth(grid.extent().z());
    for (std::size_t b = 0; b < boundary.size(); ++b) {
      if (boundary[b].kind == BoundaryPatch::Kind::top) {
        Q(b, p) = qs;
        continue;
      }
      const double column = top_depth - optics[p].depth(boundary[b].center.z());
      Q(b, p) = qe + (r > 0 && qs > 0 ? qs * 2.0 * r * expint(3, std::max(column, 0.0)) : 0.0);
    }
  }
  return Q;
}

Problem3D make_problem(VoxelGrid grid, AtmosphereModel atm, BoundarySources src, double wall_reflectivity) {
  atm.validate();
  src.validate();
  if (atm.n_freq() > 8) throw std::invalid_argument("make_problem: at most 8 frequency channels in 3D");
  if (std::abs(atm.column.z_top() - grid.extent().z()) > 1e-12 * grid.extent().z())
    throw std::invalid_argument("make_problem: grid height must equal the column top");
  std::vector<ColumnOptics> optics;
  for (std::size_t p = 0; p < atm.n_freq(); ++p) optics.emplace_back(atm, p);
  auto boundary = make_boundary(grid);
  const auto N = static_cast<Eigen::Index>(grid.n_active());
  const auto P = static_cast<Eigen::Index>(atm.n_freq());
  Eigen::MatrixXd kappa(N, P), albedo(N, P), beta(N, P);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index p = 0; p < P; ++p) {
      const double z = grid.active_centers()[i].z();
      kappa(i, p) = optics[p].kappa(z);
      albedo(i, p) = optics[p].albedo(z);
      beta(i, p) = optics[p].beta(z);
    }
  Eigen::MatrixXd Q = ground_boundary_condition(grid, boundary, atm, src, optics);
  auto mirrors = wall_reflectivity > 0 ? side_walls(grid, wall_reflectivity) : std::vector<ReflectivePlane>{};
  return {std::move(grid), std::move(atm),   src,           std::move(mirrors), std::move(boundary),
          std::move(optics), std::move(kappa), std::move(albedo), std::move(beta),    std::move(Q)};
}

std::vector<OperatorSet> assemble_operators(const Problem3D& pr, const OperatorOptions& opts_in) {
  OperatorOptions opts = opts_in;
  if (pr.beta.cwiseAbs().maxCoeff() > 0) opts.with_dipole = true;
  std::map<std::vector<double>, std::vector<std::size_t>> groups;
  for (std::size_t p = 0; p < pr.optics.size(); ++p) groups[pr.optics[p].key()].push_back(p);
  std::vector<OperatorSet> out;
  for (auto& [key, channels] : groups) {
    const auto& optics = pr.optics[channels.front()];
    OperatorSet s;
    s.channels = channels;
    if (opts.fold_mirrors && !opts.with_dipole) {
      auto f = assemble_folded_ops(pr.grid, pr.mirrors, pr.boundary, optics, opts);
      s.volume = std::move(f.volume);
      s.surface = std::move(f.surface);
    } else {
      s.volume = assemble_volume_ops(pr.grid, optics, opts);
      s.surface = assemble_surface_ops(pr.grid, pr.boundary, optics, opts);
      s.reflected = assemble_reflected_ops(pr.grid, pr.mirrors, pr.boundary, optics, opts);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- solve

namespace {

Eigen::MatrixXd columns(const Eigen::MatrixXd& M, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd out(M.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t c = 0; c < idx.size(); ++c) out.col(c) = M.col(idx[c]);
  return out;
}

void scatter(Eigen::MatrixXd& M, const std::vector<std::size_t>& idx, const Eigen::MatrixXd& part) {
  for (std::size_t c = 0; c < idx.size(); ++c) M.col(idx[c]) = part.col(c);
}

struct Fields {
  Eigen::MatrixXd J;
  std::array<Eigen::MatrixXd, 3> K;
};

/// J and K from the isotropic source S0 and dipole s1 for one channel group.
Fields apply_set(const OperatorSet& set, const Eigen::MatrixXd& JE, const std::array<Eigen::MatrixXd, 3>& KE,
                 const Eigen::MatrixXd& S0, const std::array<Eigen::MatrixXd, 3>* s1, bool want_k) {
  Fields f;
  f.J = JE + set.volume.G.apply(S0);
  auto dipole_j = [&](const VolumeOps& ops, const std::array<Eigen::MatrixXd, 3>& d) {
    for (int a = 0; a < 3; ++a) f.J += ops.Gw[a].apply(d[a]);
  };
  auto mirrored = [](const std::array<Eigen::MatrixXd, 3>& d, int axis) {
    auto m = d;
    m[axis] = -m[axis];
    return m;
  };
  if (s1) dipole_j(set.volume, *s1);
  for (const auto& r : set.reflected) {
    if (r.volume.G.empty()) continue;
    f.J += r.volume.G.apply(S0);
    if (s1) dipole_j(r.volume, mirrored(*s1, r.plane.axis));
  }
  if (!want_k) return f;
  for (int a = 0; a < 3; ++a) {
    f.K[a] = KE[a];
    if (!set.volume.Gw[a].empty()) f.K[a] += set.volume.Gw[a].apply(S0);
    for (const auto& r : set.reflected)
      if (!r.volume.Gw[a].empty()) f.K[a] += r.volume.Gw[a].apply(S0);
  }
  if (s1) {
    auto dipole_k = [&](const VolumeOps& ops, const std::array<Eigen::MatrixXd, 3>& d) {
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) f.K[a] += ops.Gww[gww_index(a, b)].apply(d[b]);
    };
    dipole_k(set.volume, *s1);
    for (const auto& r : set.reflected)
      if (!r.volume.G.empty()) dipole_k(r.volume, mirrored(*s1, r.plane.axis));
  }
  return f;
}

}  // namespace

Solve3DResult solve3d(const Problem3D& pr, const std::vector<OperatorSet>& ops, const SolveOptions& opts) {
  if (!(opts.tol > 0)) throw std::invalid_argument("solve3d: tol must be positive");
  const auto start = std::chrono::steady_clock::now();
  const auto N = static_cast<Eigen::Index>(pr.grid.n_active());
  const auto P = static_cast<Eigen::Index>(pr.atm.n_freq());
  const auto& grid = pr.atm.grid;
  const bool dipole = pr.beta.cwiseAbs().maxCoeff() > 0;
  for (const auto& s : ops) {
    if (s.volume.G.rows() != N) throw std::invalid_argument("solve3d: operators do not match the grid");
    if (dipole && s.volume.Gww[0].empty()) throw std::invalid_argument("solve3d: beta != 0 needs dipole operators");
  }

  // Boundary-driven parts, fixed over the iteration.
  std::vector<Eigen::MatrixXd> JE(ops.size());
  std::vector<std::array<Eigen::MatrixXd, 3>> KE(ops.size());
  for (std::size_t g = 0; g < ops.size(); ++g) {
    const auto Qg = columns(pr.Q, ops[g].channels);
    JE[g] = ops[g].surface.G.apply(Qg);
    for (const auto& r : ops[g].reflected)
      if (!r.surface.G.empty()) JE[g] += r.surface.G.apply(Qg);
    for (int a = 0; a < 3; ++a) {
      KE[g][a] = Eigen::MatrixXd::Zero(N, Qg.cols());
      if (ops[g].surface.Gw[a].empty()) continue;
      KE[g][a] = ops[g].surface.Gw[a].apply(Qg);
      for (const auto& r : ops[g].reflected)
        if (!r.surface.Gw[a].empty()) KE[g][a] += r.surface.Gw[a].apply(Qg);
    }
  }

  Solve3DResult res;
  auto& st = res.state;
  st.J = Eigen::MatrixXd::Zero(N, P);
  for (auto& k : st.K) k = Eigen::MatrixXd::Zero(N, P);
  st.T = Eigen::VectorXd::Zero(N);
  const Eigen::MatrixXd absorb = pr.kappa.cwiseProduct((1.0 - pr.albedo.array()).matrix());

  auto sources = [&](const RadiationState3D& s, Eigen::MatrixXd& S0, std::array<Eigen::MatrixXd, 3>& s1) {
    S0.resize(N, P);
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index p = 0; p < P; ++p)
        S0(i, p) = absorb(i, p) * planck(grid.nodes[p], s.T(i)) + pr.kappa(i, p) * pr.albedo(i, p) * s.J(i, p);
    for (int a = 0; a < 3; ++a) s1[a] = absorb.cwiseProduct(pr.beta).cwiseProduct(s.K[a]);
  };

  auto& rep = res.report;
  for (int it = 1; it <= opts.max_iter; ++it) {
    Eigen::MatrixXd S0;
    std::array<Eigen::MatrixXd, 3> s1;
    sources(st, S0, s1);
    RadiationState3D next;
    next.J = Eigen::MatrixXd::Zero(N, P);
    for (auto& k : next.K) k = Eigen::MatrixXd::Zero(N, P);
    for (std::size_t g = 0; g < ops.size(); ++g) {
      std::array<Eigen::MatrixXd, 3> s1g;
      for (int a = 0; a < 3; ++a) s1g[a] = columns(s1[a], ops[g].channels);
      auto f = apply_set(ops[g], JE[g], KE[g], columns(S0, ops[g].channels), dipole ? &s1g : nullptr, dipole);
      scatter(next.J, ops[g].channels, f.J);
      if (dipole)
        for (int a = 0; a < 3; ++a) scatter(next.K[a], ops[g].channels, f.K[a]);
    }
    next.T = Eigen::VectorXd::Zero(N);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (Eigen::Index i = 0; i < N; ++i) {
      std::vector<double> c(P);
      double target = 0.0;
      bool any = false;
      for (Eigen::Index p = 0; p < P; ++p) {
        c[p] = absorb(i, p);
        any = any || c[p] > 0;
        target += grid.weights[p] * c[p] * next.J(i, p);
      }
      if (any) next.T(i) = invert_temperature(std::max(target, 0.0), c, grid);
    }

    const double jmax = next.J.cwiseAbs().maxCoeff();
    const double tmax = next.T.cwiseAbs().maxCoeff();
    const double dj = (next.J - st.J).cwiseAbs().maxCoeff();
    const double dt = (next.T - st.T).cwiseAbs().maxCoeff();
    const double residual = (jmax > 0 ? dj / jmax : 0.0) + dt;
    for (Eigen::Index i = 0; i < N; ++i) {
      for (Eigen::Index p = 0; p < P; ++p)
        if (next.J(i, p) < st.J(i, p) - 1e-12 * jmax) ++rep.monotonicity_violations;
      if (next.T(i) < st.T(i) - 1e-12 * tmax) ++rep.monotonicity_violations;
    }
    if (!dipole) next.K = st.K;
    st = std::move(next);
    rep.iterations = it;
    rep.residual_history.push_back(residual);
    if (residual <= opts.tol) {
      rep.converged = true;
      break;
    }
  }

  if (!dipole) {
    // K does not feed back without anisotropy; evaluate it once at the end.
    Eigen::MatrixXd S0;
    std::array<Eigen::MatrixXd, 3> s1;
    sources(st, S0, s1);
    for (std::size_t g = 0; g < ops.size(); ++g) {
      if (ops[g].volume.Gw[0].empty()) continue;
      auto f = apply_set(ops[g], JE[g], KE[g], columns(S0, ops[g].channels), nullptr, true);
      for (int a = 0; a < 3; ++a) scatter(st.K[a], ops[g].channels, f.K[a]);
    }
  }

  // Closure residual per cell.
  for (Eigen::Index i = 0; i < N; ++i) {
    double r = 0.0, absorbed = 0.0;
    for (Eigen::Index p = 0; p < P; ++p) {
      const double w = grid.weights[p] * absorb(i, p);
      r += w * (planck(grid.nodes[p], st.T(i)) - st.J(i, p));
      absorbed += w * st.J(i, p);
    }
    rep.closure_residual = std::max(rep.closure_residual, std::abs(r));
    if (absorbed > 0) rep.closure_residual_relative = std::max(rep.closure_residual_relative, std::abs(r) / absorbed);
  }
  rep.wall_time = std::chrono::steady_clock::now() - start;
  return res;
}

// ---------------------------------------------------------------- output

void write_volume_csv(const std::filesystem::path& path, const Problem3D& pr, const RadiationState3D& s) {
  const Eigen::VectorXd total = s.J * Eigen::Map<const Eigen::VectorXd>(pr.atm.grid.weights.data(), s.J.cols());
  std::vector<std::vector<double>> rows;
  const auto& c = pr.grid.active_centers();
  for (std::size_t i = 0; i < c.size(); ++i)
    rows.push_back({c[i].x(), c[i].y(), c[i].z(), ScaledUnits::to_kelvin(s.T(i)), total(i)});
  csv::write(path, {"x", "y", "z", "T", "Jtotal"}, rows);
}

void write_ground_slice_csv(const std::filesystem::path& path, const Problem3D& pr, const RadiationState3D& s) {
  const Eigen::VectorXd total = s.J * Eigen::Map<const Eigen::VectorXd>(pr.atm.grid.weights.data(), s.J.cols());
  const auto& n = pr.grid.resolution();
  std::vector<std::vector<double>> rows;
  for (int j = 0; j < n[1]; ++j)
    for (int i = 0; i < n[0]; ++i)
      for (int k = 0; k < n[2]; ++k) {
        const long a = pr.grid.active_index(i, j, k);
        if (a < 0) continue;
        const auto& c = pr.grid.active_centers()[a];
        rows.push_back({c.x(), c.y(), pr.grid.terrain()(c.x(), c.y()), ScaledUnits::to_kelvin(s.T(a)), total(a)});
        break;
      }
  csv::write(path, {"x", "y", "g", "T", "Jtotal"}, rows);
}

}  // namespace radslab
