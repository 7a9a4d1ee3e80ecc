#pragma once

#include <Eigen/Core>
#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <variant>
#include <vector>

#include "radslab/atmosphere.hpp"
#include "radslab/hmatrix.hpp"
#include "radslab/radiometry.hpp"
#include "radslab/stratified.hpp"

namespace radslab {

/// Ground height g(x, y) >= 0 in scaled altitude units.
struct Terrain {
  std::function<double(double, double)> height;

  static Terrain flat();
  /// Two smooth ridges parallel to y with a valley floor between them.
  static Terrain valley(double Lx, double Ly, double ridge_height);
  /// CSV `x,y,g` on a rectangular lattice, bilinear in between.
  static Terrain from_csv(const std::filesystem::path& path);

  double operator()(double x, double y) const { return height ? height(x, y) : 0.0; }
  bool is_flat() const { return !height; }
  /// (dg/dx, dg/dy) by central differences.
  Eigen::Vector2d gradient(double x, double y) const;
};

/// Uniform voxel grid on [0, Lx] x [0, Ly] x [0, H]. Cells whose centre lies
/// below the terrain are masked and carry no unknowns.
class VoxelGrid {
 public:
  VoxelGrid(Eigen::Vector3d extent, std::array<int, 3> resolution, Terrain terrain = Terrain::flat());

  const Eigen::Vector3d& extent() const { return extent_; }
  const std::array<int, 3>& resolution() const { return res_; }
  const Eigen::Vector3d& spacing() const { return h_; }
  double cell_volume() const { return h_.prod(); }
  const Terrain& terrain() const { return terrain_; }

  std::size_t n_cells() const { return static_cast<std::size_t>(res_[0]) * res_[1] * res_[2]; }
  std::size_t n_active() const { return centers_.size(); }

  Eigen::Vector3d center(int i, int j, int k) const;
  bool masked(int i, int j, int k) const;
  /// Active index of a cell, or -1 when masked.
  long active_index(int i, int j, int k) const;
  const std::vector<Eigen::Vector3d>& active_centers() const { return centers_; }
  const std::array<int, 3>& cell_of(std::size_t active) const { return cells_[active]; }
  BoundingBox cell_box(std::size_t active) const;
  /// Cell containing p, if p is inside the box.
  std::optional<std::array<int, 3>> locate(const Eigen::Vector3d& p) const;

 private:
  Eigen::Vector3d extent_;
  std::array<int, 3> res_;
  Eigen::Vector3d h_;
  Terrain terrain_;
  std::vector<long> index_;
  std::vector<Eigen::Vector3d> centers_;
  std::vector<std::array<int, 3>> cells_;
};

/// int kappa ds along [x, y] (arclength), by the midpoint rule on every
/// voxel segment the line crosses. Exact for kappa affine within voxels.
double line_attenuation(const Eigen::Vector3d& x, const Eigen::Vector3d& y, const VoxelGrid& grid,
                        const std::function<double(const Eigen::Vector3d&)>& kappa);

/// False when [x, y] passes through a masked cell or below the terrain.
bool segment_visible(const Eigen::Vector3d& x, const Eigen::Vector3d& y, const VoxelGrid& grid);

/// Optical properties of one frequency channel as functions of altitude:
/// kappa per unit length is kappa(nu, tau(z)) rho(z).
class ColumnOptics {
 public:
  ColumnOptics(const AtmosphereModel& atm, std::size_t channel, int table_size = 8192);
  /// Constant absorption per unit length, no scattering.
  static ColumnOptics uniform(double kappa, double z_top);

  double kappa(double z) const;
  double albedo(double z) const;
  double beta(double z) const;
  /// int_0^z kappa dz'.
  double depth(double z) const;
  double z_top() const { return z_top_; }
  /// Attenuation along the straight segment [x, y].
  double attenuation(const Eigen::Vector3d& x, const Eigen::Vector3d& y) const;
  /// Identity of the kappa profile; channels with equal keys share kernels.
  const std::vector<double>& key() const { return kappa_; }

 private:
  ColumnOptics() = default;
  double lookup(const std::vector<double>& t, double z) const;

  double z_top_ = 1.0;
  double dz_ = 1.0;
  std::vector<double> kappa_, albedo_, beta_, depth_;
};

/// Axis-aligned mirror with reflectivity R.
struct ReflectivePlane {
  int axis;
  double position;
  double R = 1.0;

  Eigen::Vector3d mirror(const Eigen::Vector3d& p) const;
  BoundingBox mirror(const BoundingBox& b) const;
};

/// The four vertical faces of the grid.
std::vector<ReflectivePlane> side_walls(const VoxelGrid& grid, double R);

/// Emitting boundary element: a ground patch following the terrain or a top
/// patch, parameterized over the rectangle [u0,u1] x [v0,v1] in (x, y).
struct BoundaryPatch {
  enum class Kind { ground, top };
  Kind kind;
  double u0, u1, v0, v1;
  Eigen::Vector3d center;
  Eigen::Vector3d normal;  // outward
  double area;
};

std::vector<BoundaryPatch> make_boundary(const VoxelGrid& grid);

/// Dense or hierarchical matrix with a uniform multi-vector product.
class KernelOperator {
 public:
  KernelOperator() = default;
  explicit KernelOperator(Eigen::MatrixXd dense) : rep_(std::move(dense)) {}
  explicit KernelOperator(std::shared_ptr<const HMatrix> h) : rep_(std::move(h)) {}

  Eigen::Index rows() const;
  Eigen::Index cols() const;
  bool hierarchical() const { return std::holds_alternative<std::shared_ptr<const HMatrix>>(rep_); }
  bool empty() const { return std::holds_alternative<std::monostate>(rep_); }
  Eigen::MatrixXd apply(const Eigen::MatrixXd& X) const;
  std::size_t stored_entries() const;
  Eigen::MatrixXd to_dense() const;
  const HMatrix* hmatrix() const;

 private:
  std::variant<std::monostate, Eigen::MatrixXd, std::shared_ptr<const HMatrix>> rep_;
};

struct OperatorOptions {
  bool hierarchical = true;
  double eps = 1e-6;
  double eta = 2.0;
  std::size_t leaf_size = 48;
  /// Build the direction-weighted K kernels.
  bool with_flux = true;
  /// Build the second-moment kernels needed when beta != 0.
  bool with_dipole = false;
  /// Add the mirror images to the direct operators instead of keeping one
  /// operator set per mirror. Ignored when dipole kernels are built.
  bool fold_mirrors = true;
};

/// Kernel components from a source element to a target x, with
/// omega = (x - y)/|x - y| the travel direction:
///   G = 1/4pi int e^{-tau}/r^2, G_a = int omega_a (...), G_ab = int omega_a omega_b (...).
/// Index 0 is G, 1..3 are G_x..G_z, 4..9 are G_xx, G_xy, G_xz, G_yy, G_yz, G_zz.
using KernelValues = std::array<double, 10>;

KernelValues volume_kernel(const Eigen::Vector3d& x, const BoundingBox& cell, const ColumnOptics& optics);
/// Self term for x at the centre of an axis-aligned cell of size h, constant kappa.
KernelValues self_kernel(const Eigen::Vector3d& h, double kappa);
/// Boundary kernel: 1/4pi int (omega.n)^2 e^{-tau}/r^2 dGamma over incoming
/// directions, and its omega-weighted components (indices 0..3).
KernelValues surface_kernel(const Eigen::Vector3d& x, const BoundaryPatch& patch, const VoxelGrid& grid,
                            const ColumnOptics& optics, const ReflectivePlane* mirror = nullptr);

/// G, G_omega (3) and optionally G_omega_omega (6) on the active cells.
struct VolumeOps {
  KernelOperator G;
  std::array<KernelOperator, 3> Gw;
  std::array<KernelOperator, 6> Gww;
};

/// Boundary-to-cell operators for J (G) and K (Gw).
struct SurfaceOps {
  KernelOperator G;
  std::array<KernelOperator, 3> Gw;
};

VolumeOps assemble_volume_ops(const VoxelGrid& grid, const ColumnOptics& optics, const OperatorOptions& opts = {});
SurfaceOps assemble_surface_ops(const VoxelGrid& grid, const std::vector<BoundaryPatch>& boundary,
                                const ColumnOptics& optics, const OperatorOptions& opts = {});

/// Single-bounce contributions through one mirror: the path x -> x' -> y is
/// evaluated as the straight path from x to the mirror image of y.
struct ReflectedOps {
  ReflectivePlane plane;
  VolumeOps volume;
  SurfaceOps surface;
};

std::vector<ReflectedOps> assemble_reflected_ops(const VoxelGrid& grid, const std::vector<ReflectivePlane>& planes,
                                                 const std::vector<BoundaryPatch>& boundary,
                                                 const ColumnOptics& optics, const OperatorOptions& opts = {});

/// Direct operators with the single-bounce contributions of all planes added
/// in. The dipole kernels change sign through a mirror, so this is only
/// available without them.
struct FoldedOps {
  VolumeOps volume;
  SurfaceOps surface;
};

FoldedOps assemble_folded_ops(const VoxelGrid& grid, const std::vector<ReflectivePlane>& planes,
                              const std::vector<BoundaryPatch>& boundary, const ColumnOptics& optics,
                              const OperatorOptions& opts = {});

/// Boundary coefficients Q per (patch, channel): on the ground
/// QE B(TE) + QS B(TS) 2 r E_3(kappa Z_col), with Z_col the column above the
/// patch; on the top QS B(TS). The boundary intensity is (omega.n)^- Q.
Eigen::MatrixXd ground_boundary_condition(const VoxelGrid& grid, const std::vector<BoundaryPatch>& boundary,
                                          const AtmosphereModel& atm, const BoundarySources& src,
                                          const std::vector<ColumnOptics>& optics);

/// Operators shared by channels with the same kappa profile.
struct OperatorSet {
  std::vector<std::size_t> channels;
  VolumeOps volume;
  SurfaceOps surface;
  std::vector<ReflectedOps> reflected;
};

struct Problem3D {
  VoxelGrid grid;
  AtmosphereModel atm;  // spectral grid and column; at most 8 channels
  BoundarySources src;
  std::vector<ReflectivePlane> mirrors;
  std::vector<BoundaryPatch> boundary;
  std::vector<ColumnOptics> optics;  // per channel
  Eigen::MatrixXd kappa, albedo, beta;  // (active cell x channel)
  Eigen::MatrixXd Q;                    // (patch x channel)
};

Problem3D make_problem(VoxelGrid grid, AtmosphereModel atm, BoundarySources src, double wall_reflectivity);

std::vector<OperatorSet> assemble_operators(const Problem3D& problem, const OperatorOptions& opts = {});

struct RadiationState3D {
  Eigen::MatrixXd J;                 // (active cell x channel)
  std::array<Eigen::MatrixXd, 3> K;  // components, each (active cell x channel)
  Eigen::VectorXd T;                 // scaled temperature per active cell
};

struct Solve3DResult {
  RadiationState3D state;
  SolveReport report;
};

Solve3DResult solve3d(const Problem3D& problem, const std::vector<OperatorSet>& ops, const SolveOptions& opts = {});

/// CSV `x,y,z,T,Jtotal` per active cell, T in Kelvin.
void write_volume_csv(const std::filesystem::path& path, const Problem3D& problem, const RadiationState3D& s);
/// CSV `x,y,g,T,Jtotal` of the lowest active cell in every column.
void write_ground_slice_csv(const std::filesystem::path& path, const Problem3D& problem, const RadiationState3D& s);

}  // namespace radslab
