#include "radslab/stratified.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>

#include "radslab/detail/characteristics.hpp"
#include "radslab/quadrature.hpp"
#include "radslab/specfun.hpp"

namespace radslab {

namespace {

constexpr int kMaxOrder = 5;

const QuadratureRule& gauss8_unit() {
  static const QuadratureRule rule = gauss_legendre(8, 0.0, 1.0);
  return rule;
}

// Weights (w_a, w_b) with int_{ua}^{ub} E_n(u) f(u) du = w_a f(ua) + w_b f(ub)
// for f linear. Ea1/Ea2 are E_{n+1}, E_{n+2} at ua, likewise Eb1/Eb2 at ub.
std::pair<double, double> cell_weights(int n, double ua, double ub, double Ea1, double Ea2, double Eb1, double Eb2) {
  const double d = ub - ua;
  if (!(d > 0.0)) return {0.0, 0.0};
  double wa, wb;
  if (ua > 20.0 * d && d < 0.5) {
    // Far from the log singularity: E_n is smooth on the cell and the
    // closed form below would cancel badly.
    wa = wb = 0.0;
    const auto& g = gauss8_unit();
    for (std::size_t q = 0; q < g.nodes.size(); ++q) {
      const double t = g.nodes[q];
      const double e = detail::expint_any(n, ua + t * d) * g.weights[q] * d;
      wa += e * (1.0 - t);
      wb += e * t;
    }
  } else {
    // int E_n = -E_{n+1};  int u E_n = -u E_{n+1} - E_{n+2}
    const double m0 = Ea1 - Eb1;
    const double m1 = (ua * Ea1 + Ea2) - (ub * Eb1 + Eb2);
    wa = (ub * m0 - m1) / d;
    wb = (m1 - ua * m0) / d;
  }
  return {std::max(wa, 0.0), std::max(wb, 0.0)};
}

}  // namespace

/// Kernel matrices W_n (n = 1..5), with the 1/2 angular normalisation and
/// the ground reflection folded in. For odd n the direct part is symmetric;
/// for even n it changes sign above the target level (downward radiation).
struct StratifiedSolver::KernelSet {
  std::array<Eigen::MatrixXd, kMaxOrder> W;
};

MomentField MomentField::zeros(Eigen::Index n_freq, Eigen::Index n_levels) {
  return {Eigen::MatrixXd::Zero(n_freq, n_levels), Eigen::MatrixXd::Zero(n_freq, n_levels),
          Eigen::MatrixXd::Zero(n_freq, n_levels)};
}

StratifiedSolver::StratifiedSolver(AtmosphereModel atm, BoundarySources src)
    : atm_(std::move(atm)), src_(src) {
  atm_.validate();
  src_.validate();
  const auto P = atm_.n_freq();
  const auto K = static_cast<Eigen::Index>(atm_.n_levels());
  if (K < 3) throw std::invalid_argument("stratified solver: need at least 3 tau levels");
  const auto& tau = atm_.column.tau_nodes();

  X_.resize(P);
  for (std::size_t p = 0; p < P; ++p) {
    Eigen::VectorXd x(K);
    x(0) = 0.0;
    for (Eigen::Index k = 1; k < K; ++k)
      x(k) = x(k - 1) + 0.5 * (atm_.kappa(p, k - 1) + atm_.kappa(p, k)) * (tau[k] - tau[k - 1]);
    X_[p] = std::move(x);
  }

  std::map<std::pair<std::vector<double>, double>, std::size_t> lookup;
  kernel_index_.resize(P);
  for (std::size_t p = 0; p < P; ++p) {
    std::vector<double> key(X_[p].data(), X_[p].data() + K);
    auto [it, inserted] = lookup.try_emplace({std::move(key), atm_.r_ground(p)}, kernel_sets_.size());
    if (inserted) kernel_sets_.push_back(nullptr);
    kernel_index_[p] = it->second;
  }
  std::vector<std::size_t> first_user(kernel_sets_.size());
  for (std::size_t p = P; p-- > 0;) first_user[kernel_index_[p]] = p;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (std::ptrdiff_t s = 0; s < static_cast<std::ptrdiff_t>(kernel_sets_.size()); ++s) {
    const auto p = first_user[s];
    kernel_sets_[s] = build_kernels(X_[p], atm_.r_ground(p));
  }

  S3_.resize(static_cast<Eigen::Index>(P), K);
  S4_.resize(static_cast<Eigen::Index>(P), K);
  S5_.resize(static_cast<Eigen::Index>(P), K);
  for (std::size_t p = 0; p < P; ++p)
    for (Eigen::Index k = 0; k < K; ++k) {
      S3_(p, k) = boundary_moment_S(3, p, tau[k]);
      S4_(p, k) = boundary_moment_S(4, p, tau[k]);
      S5_(p, k) = boundary_moment_S(5, p, tau[k]);
    }
}

StratifiedSolver::~StratifiedSolver() = default;
StratifiedSolver::StratifiedSolver(StratifiedSolver&&) noexcept = default;
StratifiedSolver& StratifiedSolver::operator=(StratifiedSolver&&) noexcept = default;

std::unique_ptr<StratifiedSolver::KernelSet> StratifiedSolver::build_kernels(const Eigen::VectorXd& X, double r) {
  const Eigen::Index K = X.size();
  auto set = std::make_unique<StratifiedSolver::KernelSet>();
  for (auto& w : set->W) w = Eigen::MatrixXd::Zero(K, K);

  // E_m at node-to-node distances, m = 2..7 (index m - 2).
  constexpr int kOrders = kMaxOrder + 2 - 1;
  std::vector<std::array<double, kOrders>> Ed(static_cast<std::size_t>(K * K)), Er;
  if (r > 0) Er.resize(static_cast<std::size_t>(K * K));
  for (Eigen::Index i = 0; i < K; ++i)
    for (Eigen::Index k = 0; k < K; ++k) {
      for (int m = 2; m <= kMaxOrder + 2; ++m) {
        Ed[i * K + k][m - 2] = detail::expint_any(m, std::abs(X(i) - X(k)));
        if (r > 0) Er[i * K + k][m - 2] = detail::expint_any(m, X(i) + X(k));
      }
    }
  auto E = [](const std::array<double, kOrders>& a, int m) { return a[m - 2]; };

  for (Eigen::Index i = 0; i < K; ++i) {
    for (Eigen::Index k = 0; k + 1 < K; ++k) {
      const bool below = k + 1 <= i;
      // Direct path: near node first.
      const Eigen::Index near = below ? k + 1 : k;
      const Eigen::Index far = below ? k : k + 1;
      const double ua = std::abs(X(i) - X(near));
      const double ub = std::abs(X(i) - X(far));
      const auto& A = Ed[i * K + near];
      const auto& B = Ed[i * K + far];
      for (int n = 1; n <= kMaxOrder; ++n) {
        const auto [wa, wb] = cell_weights(n, ua, ub, E(A, n + 1), E(A, n + 2), E(B, n + 1), E(B, n + 2));
        const double sign = (n % 2 == 0 && !below) ? -1.0 : 1.0;
        set->W[n - 1](i, near) += 0.5 * sign * wa;
        set->W[n - 1](i, far) += 0.5 * sign * wb;
      }
      if (r > 0) {
        // Reflected path: up from the ground, always travelling upward.
        const double va = X(i) + X(k), vb = X(i) + X(k + 1);
        const auto& C = Er[i * K + k];
        const auto& D = Er[i * K + k + 1];
        for (int n = 1; n <= kMaxOrder; ++n) {
          const auto [wa, wb] = cell_weights(n, va, vb, E(C, n + 1), E(C, n + 2), E(D, n + 1), E(D, n + 2));
          set->W[n - 1](i, k) += 0.5 * r * wa;
          set->W[n - 1](i, k + 1) += 0.5 * r * wb;
        }
      }
    }
  }
  return set;
}

const StratifiedSolver::KernelSet& StratifiedSolver::kernels(std::size_t p) const {
  return *kernel_sets_[kernel_index_[p]];
}

const Eigen::VectorXd& StratifiedSolver::optical_depth_nodes(std::size_t p) const { return X_.at(p); }

double StratifiedSolver::optical_depth(std::size_t p, double tau) const {
  const auto& t = atm_.column.tau_nodes();
  const auto& X = X_.at(p);
  if (tau <= 0.0) return 0.0;
  if (tau >= t.back()) return X(X.size() - 1);
  const auto it = std::upper_bound(t.begin(), t.end(), tau);
  const auto k = static_cast<Eigen::Index>(it - t.begin()) - 1;
  const double h = t[k + 1] - t[k];
  const double s = tau - t[k];
  const double k0 = atm_.kappa(p, k), k1 = atm_.kappa(p, k + 1);
  return X(k) + k0 * s + 0.5 * (k1 - k0) * s * s / h;
}

double StratifiedSolver::boundary_moment_S(int i, std::size_t p, double tau) const {
  if (i < 3 || i > 5) throw std::domain_error("boundary_moment_S: order must be 3, 4 or 5");
  const double Z = atm_.column.Z();
  if (tau < 0 || tau > Z * (1 + 1e-12)) throw std::domain_error("boundary_moment_S: tau outside [0, Z]");
  const double nu = atm_.grid.nodes[p];
  const double qp = src_.q_plus(nu), qm = src_.q_minus(nu);
  const double x = optical_depth(p, tau);
  const double xz = X_[p](X_[p].size() - 1);
  const double r = atm_.r_ground(p);
  const double sign = (i % 2 == 0) ? -1.0 : 1.0;
  double s = 0.0;
  if (qp != 0.0) s += 0.5 * detail::expint_any(i, x) * qp;
  if (qm != 0.0) {
    s += sign * 0.5 * detail::expint_any(i, std::max(xz - x, 0.0)) * qm;
    // Reflected sunlight travels upward, so it adds to every moment.
    if (r > 0) s += 0.5 * r * detail::expint_any(i, xz + x) * qm;
  }
  return s;
}

double StratifiedSolver::kernel_F(int i, std::size_t p, double tau, double t) const {
  if (i < 1 || i > 5) throw std::domain_error("kernel_F: order must be in 1..5");
  const double xa = optical_depth(p, tau), xb = optical_depth(p, t);
  const double d = std::abs(xa - xb);
  if (i == 1 && d == 0.0) throw std::domain_error("kernel_F: E_1 kernel is singular at tau = t");
  const double r = atm_.r_ground(p);
  double f = 0.5 * detail::expint_any(i, d);
  if (r > 0) f += 0.5 * r * detail::expint_any(i, xa + xb);
  return f;
}

SourceField StratifiedSolver::compute_sources(const MomentField& m, const Eigen::VectorXd& T) const {
  const auto P = static_cast<Eigen::Index>(atm_.n_freq());
  const auto K = static_cast<Eigen::Index>(atm_.n_levels());
  if (m.J.rows() != P || m.J.cols() != K || T.size() != K)
    throw std::invalid_argument("compute_sources: shape mismatch");
  SourceField s{Eigen::MatrixXd(P, K), Eigen::MatrixXd(P, K), Eigen::MatrixXd(P, K)};
  for (Eigen::Index p = 0; p < P; ++p) {
    const double nu = atm_.grid.nodes[p];
    for (Eigen::Index k = 0; k < K; ++k) {
      const double a = atm_.albedo(p, k), b = atm_.b(p, k), beta = atm_.beta(p, k);
      const double J = m.J(p, k), Km = m.K(p, k), L = m.L(p, k);
      const double scatter = (9.0 / 8.0 - b / 8.0) * J + beta * Km - 3.0 / 8.0 * (1.0 - b) * L;
      const double emission = (1.0 - a) > 0 ? (1.0 - a) * planck(nu, T(k)) : 0.0;
      s.R_hat(p, k) = a * scatter + emission;
      s.R(p, k) = atm_.kappa(p, k) * s.R_hat(p, k);
      s.P(p, k) = 3.0 / 8.0 * (1.0 - b) * (3.0 * L - J);
    }
  }
  return s;
}

MomentField StratifiedSolver::update_moments(const SourceField& s) const {
  const auto P = static_cast<Eigen::Index>(atm_.n_freq());
  const auto K = static_cast<Eigen::Index>(atm_.n_levels());
  if (s.R_hat.rows() != P || s.R_hat.cols() != K) throw std::invalid_argument("update_moments: shape mismatch");
  if (!s.R_hat.allFinite() || !s.P.allFinite()) throw std::invalid_argument("update_moments: sources must be finite");
  MomentField out = MomentField::zeros(P, K);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (Eigen::Index p = 0; p < P; ++p) {
    const auto& W = kernels(static_cast<std::size_t>(p)).W;
    const Eigen::VectorXd r = s.R_hat.row(p).transpose();
    const Eigen::VectorXd q = atm_.albedo.row(p).transpose().cwiseProduct(s.P.row(p).transpose());
    out.J.row(p) = (S3_.row(p).transpose() + W[0] * r + W[2] * q).transpose();
    out.K.row(p) = (S4_.row(p).transpose() + W[1] * r + W[3] * q).transpose();
    out.L.row(p) = (S5_.row(p).transpose() + W[2] * r + W[4] * q).transpose();
  }
  return out;
}

Eigen::VectorXd StratifiedSolver::update_temperature(const MomentField& m) const {
  const auto P = static_cast<Eigen::Index>(atm_.n_freq());
  const auto K = static_cast<Eigen::Index>(atm_.n_levels());
  Eigen::VectorXd T = Eigen::VectorXd::Zero(K);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (Eigen::Index k = 0; k < K; ++k) {
    std::vector<double> c(static_cast<std::size_t>(P));
    double target = 0.0;
    bool any = false;
    for (Eigen::Index p = 0; p < P; ++p) {
      c[p] = atm_.kappa(p, k) * (1.0 - atm_.albedo(p, k));
      any = any || c[p] > 0;
      target += atm_.grid.weights[p] * c[p] * m.J(p, k);
    }
    if (any) T(k) = invert_temperature(std::max(target, 0.0), c, atm_.grid);
  }
  return T;
}

std::pair<double, double> StratifiedSolver::closure_residual(const MomentField& m, const Eigen::VectorXd& T) const {
  const auto P = static_cast<Eigen::Index>(atm_.n_freq());
  const auto K = static_cast<Eigen::Index>(atm_.n_levels());
  double worst = 0.0, worst_rel = 0.0;
  for (Eigen::Index k = 0; k < K; ++k) {
    double res = 0.0, absorbed = 0.0;
    for (Eigen::Index p = 0; p < P; ++p) {
      const double c = atm_.kappa(p, k) * (1.0 - atm_.albedo(p, k));
      if (c == 0.0) continue;
      const double w = atm_.grid.weights[p] * c;
      res += w * (planck(atm_.grid.nodes[p], T(k)) - m.J(p, k));
      absorbed += w * m.J(p, k);
    }
    worst = std::max(worst, std::abs(res));
    if (absorbed > 0) worst_rel = std::max(worst_rel, std::abs(res) / absorbed);
  }
  return {worst, worst_rel};
}

double StratifiedSolver::reconstruct_intensity(double tau, double mu, std::size_t p, const SourceField& s) const {
  if (mu == 0.0 || std::abs(mu) > 1.0) throw std::domain_error("reconstruct_intensity: mu must be in [-1,1] \\ {0}");
  const auto K = static_cast<Eigen::Index>(atm_.n_levels());
  const auto& X = X_.at(p);
  const double nu = atm_.grid.nodes[p];
  const double amu = std::abs(mu);
  auto src = [&](Eigen::Index k) { return s.R_hat(p, k) + atm_.albedo(p, k) * s.P(p, k) * mu * mu; };
  const double x = optical_depth(p, tau);
  const auto& tn = atm_.column.tau_nodes();
  Eigen::Index cell = static_cast<Eigen::Index>(std::upper_bound(tn.begin(), tn.end(), tau) - tn.begin()) - 1;
  cell = std::clamp<Eigen::Index>(cell, 0, K - 2);
  const double dx = X(cell + 1) - X(cell);
  const double frac = dx > 0 ? (x - X(cell)) / dx : 0.0;
  const double s_here = (1.0 - frac) * src(cell) + frac * src(cell + 1);

  auto downward_from_top = [&](Eigen::Index stop_cell, double stop_x, double stop_src) {
    double I = amu * src_.q_minus(nu);
    for (Eigen::Index k = K - 2; k > stop_cell; --k) I = detail::sweep_cell(I, (X(k + 1) - X(k)) / amu, src(k + 1), src(k));
    return detail::sweep_cell(I, (X(stop_cell + 1) - stop_x) / amu, src(stop_cell + 1), stop_src);
  };

  if (mu < 0) return downward_from_top(cell, x, s_here);

  double I = mu * src_.q_plus(nu);
  const double r = atm_.r_ground(p);
  if (r > 0) I += r * downward_from_top(0, 0.0, src(0));
  for (Eigen::Index k = 0; k < cell; ++k) I = detail::sweep_cell(I, (X(k + 1) - X(k)) / mu, src(k), src(k + 1));
  return detail::sweep_cell(I, (x - X(cell)) / mu, src(cell), s_here);
}

StratifiedResult StratifiedSolver::solve(const SolveOptions& opts) const {
  if (!(opts.tol > 0)) throw std::invalid_argument("solve: tol must be positive");
  const auto start = std::chrono::steady_clock::now();
  const auto P = static_cast<Eigen::Index>(atm_.n_freq());
  const auto K = static_cast<Eigen::Index>(atm_.n_levels());

  StratifiedResult res{MomentField::zeros(P, K), Eigen::VectorXd::Zero(K), {}, {}};
  auto& rep = res.report;
  for (int it = 1; it <= opts.max_iter; ++it) {
    SourceField s = compute_sources(res.moments, res.T);
    MomentField next = update_moments(s);
    Eigen::VectorXd T_next = update_temperature(next);

    const double jmax = next.J.cwiseAbs().maxCoeff();
    const double tmax = T_next.cwiseAbs().maxCoeff();
    const double dj = (next.J - res.moments.J).cwiseAbs().maxCoeff();
    const double dt = (T_next - res.T).cwiseAbs().maxCoeff();
    const double residual = (jmax > 0 ? dj / jmax : 0.0) + dt;

    const double slack_j = 1e-12 * jmax, slack_t = 1e-12 * tmax;
    for (Eigen::Index p = 0; p < P; ++p)
      for (Eigen::Index k = 0; k < K; ++k)
        if (next.J(p, k) < res.moments.J(p, k) - slack_j) ++rep.monotonicity_violations;
    for (Eigen::Index k = 0; k < K; ++k)
      if (T_next(k) < res.T(k) - slack_t) ++rep.monotonicity_violations;

    res.moments = std::move(next);
    res.T = std::move(T_next);
    rep.iterations = it;
    rep.residual_history.push_back(residual);
    if (residual <= opts.tol) {
      rep.converged = true;
      break;
    }
  }
  res.sources = compute_sources(res.moments, res.T);
  std::tie(rep.closure_residual, rep.closure_residual_relative) = closure_residual(res.moments, res.T);
  rep.wall_time = std::chrono::steady_clock::now() - start;
  return res;
}

double boundary_moment_S(int i, std::size_t nu_index, double tau, const AtmosphereModel& atm,
                         const BoundarySources& src) {
  return StratifiedSolver(atm, src).boundary_moment_S(i, nu_index, tau);
}

double kernel_F(int i, std::size_t nu_index, double tau, double t, const AtmosphereModel& atm) {
  return StratifiedSolver(atm, BoundarySources{}).kernel_F(i, nu_index, tau, t);
}

SourceField compute_sources(const MomentField& m, const Eigen::VectorXd& T, const AtmosphereModel& atm) {
  return StratifiedSolver(atm, BoundarySources{}).compute_sources(m, T);
}

MomentField update_moments(const SourceField& s, const AtmosphereModel& atm, const BoundarySources& src) {
  return StratifiedSolver(atm, src).update_moments(s);
}

StratifiedResult solve(const AtmosphereModel& atm, const BoundarySources& src, const SolveOptions& opts) {
  return StratifiedSolver(atm, src).solve(opts);
}

Eigen::VectorXd spectral_total(const Eigen::MatrixXd& field, const SpectralGrid& grid) {
  if (static_cast<std::size_t>(field.rows()) != grid.size()) throw std::invalid_argument("spectral_total: shape mismatch");
  Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(grid.weights.data(), field.rows());
  return field.transpose() * w;
}

}  // namespace radslab
