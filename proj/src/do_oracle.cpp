#include "radslab/do_oracle.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include "radslab/detail/characteristics.hpp"
#include "radslab/quadrature.hpp"

namespace radslab {

AngularGrid AngularGrid::double_gauss(int n) {
  if (n < 2 || n % 2) throw std::invalid_argument("AngularGrid: need an even number of directions");
  const auto half = gauss_legendre(n / 2, 0.0, 1.0);
  AngularGrid g;
  for (int i = n / 2 - 1; i >= 0; --i) {
    g.mu.push_back(-half.nodes[i]);
    g.weights.push_back(half.weights[i]);
  }
  for (int i = 0; i < n / 2; ++i) {
    g.mu.push_back(half.nodes[i]);
    g.weights.push_back(half.weights[i]);
  }
  return g;
}

AngularGrid AngularGrid::full_range(int n) {
  if (n < 2 || n % 2) throw std::invalid_argument("AngularGrid: need an even number of directions");
  const auto r = gauss_legendre(n);
  return {r.nodes, r.weights};
}

void AngularGrid::validate() const {
  const std::size_t n = mu.size();
  if (n < 2 || n % 2 || weights.size() != n) throw std::invalid_argument("AngularGrid: bad sizes");
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mu[i] == 0.0 || std::abs(mu[i]) > 1.0 || !(weights[i] > 0)) throw std::invalid_argument("AngularGrid: bad node");
    if (std::abs(mu[i] + mu[n - 1 - i]) > 1e-14 || std::abs(weights[i] - weights[n - 1 - i]) > 1e-14)
      throw std::invalid_argument("AngularGrid: not symmetric");
    if (i && !(mu[i] > mu[i - 1])) throw std::invalid_argument("AngularGrid: nodes not ascending");
    sum += weights[i];
  }
  if (std::abs(sum - 2.0) > 1e-13) throw std::invalid_argument("AngularGrid: weights must sum to 2");
}

DOResult do_solve(const AtmosphereModel& atm, const BoundarySources& src, const AngularGrid& ang,
                  const DOOptions& opts) {
  atm.validate();
  src.validate();
  ang.validate();
  if (ang.size() < 8) throw std::invalid_argument("do_solve: need at least 8 directions");
  const auto P = static_cast<Eigen::Index>(atm.n_freq());
  const auto K = static_cast<Eigen::Index>(atm.n_levels());
  const auto M = static_cast<Eigen::Index>(ang.size());
  const auto& tau = atm.column.tau_nodes();

  std::vector<Eigen::VectorXd> X(P, Eigen::VectorXd::Zero(K));
  for (Eigen::Index p = 0; p < P; ++p)
    for (Eigen::Index k = 1; k < K; ++k)
      X[p](k) = X[p](k - 1) + 0.5 * (atm.kappa(p, k - 1) + atm.kappa(p, k)) * (tau[k] - tau[k - 1]);

  // Scattering matrices 1/2 p(mu_i, mu_j) w_j per distinct (b, beta).
  std::map<std::pair<double, double>, Eigen::MatrixXd> phase;
  auto phase_matrix = [&](double b, double beta) -> const Eigen::MatrixXd& {
    auto [it, inserted] = phase.try_emplace({b, beta});
    if (inserted) {
      it->second.resize(M, M);
      for (Eigen::Index i = 0; i < M; ++i)
        for (Eigen::Index j = 0; j < M; ++j)
          it->second(i, j) = 0.5 * phase_function(ang.mu[i], ang.mu[j], b, beta) * ang.weights[j];
    }
    return it->second;
  };
  for (Eigen::Index p = 0; p < P; ++p)
    for (Eigen::Index k = 0; k < K; ++k) phase_matrix(atm.b(p, k), atm.beta(p, k));

  Eigen::VectorXd w(M), wmu(M), wmu2(M);
  for (Eigen::Index j = 0; j < M; ++j) {
    w(j) = 0.5 * ang.weights[j];
    wmu(j) = w(j) * ang.mu[j];
    wmu2(j) = wmu(j) * ang.mu[j];
  }

  DOResult res;
  res.I.assign(P, Eigen::MatrixXd::Zero(K, M));
  res.moments = MomentField::zeros(P, K);
  res.T = Eigen::VectorXd::Zero(K);

  for (int it = 1; it <= opts.max_iter; ++it) {
    std::vector<Eigen::MatrixXd> I_new(P, Eigen::MatrixXd::Zero(K, M));
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (Eigen::Index p = 0; p < P; ++p) {
      const double nu = atm.grid.nodes[p];
      Eigen::MatrixXd S(K, M);
      for (Eigen::Index k = 0; k < K; ++k) {
        const double a = atm.albedo(p, k);
        const auto& Ph = phase.at({atm.b(p, k), atm.beta(p, k)});
        const Eigen::VectorXd scat = Ph * res.I[p].row(k).transpose();
        const double emit = (1.0 - a) > 0 ? (1.0 - a) * planck(nu, res.T(k)) : 0.0;
        S.row(k) = (a * scat).transpose().array() + emit;
      }
      auto& In = I_new[p];
      const double qm = src.q_minus(nu), qp = src.q_plus(nu);
      for (Eigen::Index j = 0; j < M / 2; ++j) {
        const double amu = -ang.mu[j];
        In(K - 1, j) = amu * qm;
        for (Eigen::Index k = K - 2; k >= 0; --k)
          In(k, j) = detail::sweep_cell(In(k + 1, j), (X[p](k + 1) - X[p](k)) / amu, S(k + 1, j), S(k, j));
      }
      for (Eigen::Index j = M / 2; j < M; ++j) {
        const double mu = ang.mu[j];
        In(0, j) = atm.r_ground(p) * In(0, M - 1 - j) + mu * qp;
        for (Eigen::Index k = 1; k < K; ++k)
          In(k, j) = detail::sweep_cell(In(k - 1, j), (X[p](k) - X[p](k - 1)) / mu, S(k - 1, j), S(k, j));
      }
    }

    MomentField m = MomentField::zeros(P, K);
    for (Eigen::Index p = 0; p < P; ++p) {
      m.J.row(p) = (I_new[p] * w).transpose();
      m.K.row(p) = (I_new[p] * wmu).transpose();
      m.L.row(p) = (I_new[p] * wmu2).transpose();
    }
    Eigen::VectorXd T = Eigen::VectorXd::Zero(K);
    for (Eigen::Index k = 0; k < K; ++k) {
      std::vector<double> c(P);
      double target = 0.0;
      bool any = false;
      for (Eigen::Index p = 0; p < P; ++p) {
        c[p] = atm.kappa(p, k) * (1.0 - atm.albedo(p, k));
        any = any || c[p] > 0;
        target += atm.grid.weights[p] * c[p] * m.J(p, k);
      }
      if (any) T(k) = invert_temperature(std::max(target, 0.0), c, atm.grid);
    }

    const double jmax = m.J.cwiseAbs().maxCoeff();
    const double dj = (m.J - res.moments.J).cwiseAbs().maxCoeff();
    const double residual = (jmax > 0 ? dj / jmax : 0.0) + (T - res.T).cwiseAbs().maxCoeff();
    res.I = std::move(I_new);
    res.moments = std::move(m);
    res.T = std::move(T);
    res.iterations = it;
    res.residual_history.push_back(residual);
    if (residual <= opts.tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

DOReference richardson(DOResult coarse, DOResult fine, double order) {
  const double f = 1.0 / (std::pow(2.0, order) - 1.0);
  auto ex = [f](const Eigen::MatrixXd& c, const Eigen::MatrixXd& x) -> Eigen::MatrixXd { return x + f * (x - c); };
  DOReference ref;
  ref.moments = {ex(coarse.moments.J, fine.moments.J), ex(coarse.moments.K, fine.moments.K),
                 ex(coarse.moments.L, fine.moments.L)};
  ref.T = fine.T + f * (fine.T - coarse.T);
  ref.coarse = std::move(coarse);
  ref.fine = std::move(fine);
  return ref;
}

DOReference do_reference(const AtmosphereModel& atm, const BoundarySources& src, int n, const DOOptions& opts) {
  auto coarse = do_solve(atm, src, AngularGrid::double_gauss(n), opts);
  auto fine = do_solve(atm, src, AngularGrid::double_gauss(2 * n), opts);
  return richardson(std::move(coarse), std::move(fine));
}

}  // namespace radslab
