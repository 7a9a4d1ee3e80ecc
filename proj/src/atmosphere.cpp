#include "radslab/atmosphere.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "radslab/csv.hpp"

namespace radslab {

namespace {

double simpson_step(const std::function<double(double)>& f, double a, double b, double fa, double fm, double fb,
                    double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double diff = left + right - whole;
  if (depth <= 0 || std::abs(diff) <= 15.0 * tol) return left + right + diff / 15.0;
  return simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

// Adaptive Simpson; the first level is split into 8 panels so kinks of
// piecewise profiles are not missed by a lucky symmetric sample.
double integrate_density(const DensityProfile& p, double a, double b) {
  if (b <= a) return 0.0;
  if (p.affine) {
    const auto [c0, c1] = *p.affine;
    return c0 * (b - a) + 0.5 * c1 * (b * b - a * a);
  }
  constexpr int kPanels = 8;
  double total = 0.0;
  const double h = (b - a) / kPanels;
  for (int i = 0; i < kPanels; ++i) {
    const double lo = a + i * h, hi = (i + 1 == kPanels) ? b : a + (i + 1) * h;
    const double fa = p.rho(lo), fb = p.rho(hi), fm = p.rho(0.5 * (lo + hi));
    const double whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
    total += simpson_step(p.rho, lo, hi, fa, fm, fb, whole, 1e-15, 48);
  }
  return total;
}

// Inverse of tau(z) on [z_lo, z_hi] given tau(z_lo) = tau_lo.
double invert_tau(const DensityProfile& p, double target, double z_lo, double z_hi, double tau_lo) {
  if (p.affine) {
    const auto [c0, c1] = *p.affine;
    if (c1 == 0.0) return target / c0;
    return 2.0 * target / (c0 + std::sqrt(c0 * c0 + 2.0 * c1 * target));
  }
  double lo = z_lo, hi = z_hi;
  double z = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    const double f = tau_lo + integrate_density(p, z_lo, z) - target;
    if (f == 0.0) return z;
    if (f < 0) lo = z; else hi = z;
    const double d = p.rho(z);
    double next = d > 0 ? z - f / d : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - z) <= 1e-16 * std::max(1.0, std::abs(z)) || hi - lo <= 1e-16 * std::max(1.0, hi)) {
      return next;
    }
    z = next;
  }
  return z;
}

}  // namespace

DensityProfile DensityProfile::constant(double value) { return linear(value, 0.0); }

DensityProfile DensityProfile::linear(double c0, double c1) {
  DensityProfile p;
  p.rho = [c0, c1](double z) { return c0 + c1 * z; };
  p.affine = std::make_pair(c0, c1);
  return p;
}

DensityProfile DensityProfile::standard() { return linear(1.0, -0.75); }

DensityProfile DensityProfile::piecewise_linear(std::vector<double> z, std::vector<double> rho) {
  if (z.size() != rho.size() || z.empty()) throw std::invalid_argument("density: knot arrays must match");
  for (std::size_t i = 1; i < z.size(); ++i)
    if (!(z[i] > z[i - 1])) throw std::invalid_argument("density: knots must be increasing");
  DensityProfile p;
  p.rho = [z = std::move(z), rho = std::move(rho)](double x) {
    if (x <= z.front()) return rho.front();
    if (x >= z.back()) return rho.back();
    const auto it = std::upper_bound(z.begin(), z.end(), x);
    const std::size_t k = static_cast<std::size_t>(it - z.begin()) - 1;
    const double t = (x - z[k]) / (z[k + 1] - z[k]);
    return rho[k] + t * (rho[k + 1] - rho[k]);
  };
  return p;
}

OpticalColumn::OpticalColumn(DensityProfile rho, double z_top, std::vector<double> z_nodes,
                             std::vector<double> tau_nodes)
    : rho_(std::move(rho)), z_top_(z_top), z_nodes_(std::move(z_nodes)), tau_nodes_(std::move(tau_nodes)) {
  if (z_nodes_.size() != tau_nodes_.size() || z_nodes_.size() < 2)
    throw std::invalid_argument("column: need matching z/tau nodes, at least 2");
  if (tau_nodes_.front() != 0.0) throw std::invalid_argument("column: tau must start at 0");
  for (std::size_t k = 1; k < tau_nodes_.size(); ++k)
    if (!(tau_nodes_[k] > tau_nodes_[k - 1]) || !(z_nodes_[k] > z_nodes_[k - 1]))
      throw std::invalid_argument("column: nodes must be strictly increasing");
}

double OpticalColumn::tau_of_z(double z) const {
  z = std::clamp(z, 0.0, z_top_);
  if (rho_.affine) return integrate_density(rho_, 0.0, z);
  const auto it = std::upper_bound(z_nodes_.begin(), z_nodes_.end(), z);
  const std::size_t k = it == z_nodes_.begin() ? 0 : static_cast<std::size_t>(it - z_nodes_.begin()) - 1;
  return tau_nodes_[k] + integrate_density(rho_, z_nodes_[k], z);
}

double OpticalColumn::z_of_tau(double tau) const {
  tau = std::clamp(tau, 0.0, Z());
  if (rho_.affine) return invert_tau(rho_, tau, 0.0, z_top_, 0.0);
  const auto it = std::upper_bound(tau_nodes_.begin(), tau_nodes_.end(), tau);
  std::size_t k = it == tau_nodes_.begin() ? 0 : static_cast<std::size_t>(it - tau_nodes_.begin()) - 1;
  if (k + 1 >= tau_nodes_.size()) return z_top_;
  return invert_tau(rho_, tau, z_nodes_[k], z_nodes_[k + 1], tau_nodes_[k]);
}

OpticalColumn build_column(const DensityProfile& rho, double z_top, int n_nodes) {
  if (n_nodes < 2) throw std::invalid_argument("build_column: need at least 2 nodes");
  if (!(z_top > 0)) throw std::invalid_argument("build_column: z_top must be positive");
  const int samples = std::max(1000, 8 * n_nodes);
  for (int i = 0; i <= samples; ++i) {
    const double z = z_top * i / samples;
    if (rho.rho(z) < 0) throw std::invalid_argument("build_column: negative density at z = " + std::to_string(z));
  }
  const double Z = integrate_density(rho, 0.0, z_top);
  if (!(Z > 0)) throw std::invalid_argument("build_column: column has zero optical thickness");
  std::vector<double> tau(n_nodes), z(n_nodes);
  z[0] = 0.0;
  tau[0] = 0.0;
  for (int k = 1; k < n_nodes; ++k) {
    tau[k] = Z * k / (n_nodes - 1);
    z[k] = (k + 1 == n_nodes) ? z_top : invert_tau(rho, tau[k], z[k - 1], z_top, tau[k - 1]);
  }
  tau.back() = Z;
  return OpticalColumn(rho, z_top, std::move(z), std::move(tau));
}

double cloud_albedo(double z, double Zm, double ZM, double amax) {
  const double w = ZM - Zm;
  return amax * 4.0 / (w * w) * std::max(z - Zm, 0.0) * std::max(ZM - z, 0.0);
}

double phase_function(double mu, double mu_prime, double b, double beta) {
  if (std::abs(mu) > 1.0 || std::abs(mu_prime) > 1.0) throw std::domain_error("phase_function: |mu| must be <= 1");
  if (b < 0.0 || b > 1.0) throw std::domain_error("phase_function: b must lie in [0, 1]");
  if (std::abs(beta) > b + 1e-14) throw std::domain_error("phase_function: |beta| <= b required for nonnegativity");
  const double m2 = mu * mu;
  return b + beta * mu_prime + 3.0 / 8.0 * (1.0 - b) * (3.0 - m2 + (3.0 * m2 - 1.0) * mu_prime * mu_prime);
}

KappaSpectrum KappaSpectrum::grey(double kappa) {
  return {{0.0, std::numeric_limits<double>::infinity()}, {kappa}};
}

KappaSpectrum KappaSpectrum::gemini_like() {
  return {{0.0, 3.0, std::numeric_limits<double>::infinity()}, {0.5, 0.1}};
}

KappaSpectrum KappaSpectrum::from_samples(const std::vector<double>& nu, const std::vector<double>& kappa) {
  if (nu.empty() || nu.size() != kappa.size()) throw std::invalid_argument("kappa table: need matching nonempty columns");
  KappaSpectrum s;
  s.edges.push_back(0.0);
  for (std::size_t i = 0; i < nu.size(); ++i) {
    if (i > 0 && !(nu[i] > nu[i - 1])) throw std::invalid_argument("kappa table: nu must be increasing");
    if (kappa[i] < 0) throw std::invalid_argument("kappa table: kappa must be nonnegative");
    if (i > 0) s.edges.push_back(0.5 * (nu[i - 1] + nu[i]));
  }
  s.edges.push_back(std::numeric_limits<double>::infinity());
  s.values = kappa;
  return s;
}

double KappaSpectrum::operator()(double nu) const {
  const auto it = std::upper_bound(edges.begin(), edges.end(), nu);
  std::size_t k = it == edges.begin() ? 0 : static_cast<std::size_t>(it - edges.begin()) - 1;
  k = std::min(k, values.size() - 1);
  return values[k];
}

std::vector<double> KappaSpectrum::breakpoints() const {
  std::vector<double> out;
  for (std::size_t i = 1; i + 1 < edges.size(); ++i) out.push_back(edges[i]);
  return out;
}

void BandSpec::validate() const {
  auto sorted = bands;
  std::sort(sorted.begin(), sorted.end(), [](const Band& x, const Band& y) { return x.nu_lo < y.nu_lo; });
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (!(sorted[i].nu_lo < sorted[i].nu_hi)) throw std::invalid_argument("bands: nu_lo must be < nu_hi");
    if (sorted[i].kappa < 0) throw std::invalid_argument("bands: kappa must be nonnegative");
    if (i > 0 && sorted[i].nu_lo < sorted[i - 1].nu_hi) throw std::invalid_argument("bands: bands overlap");
  }
}

double BandSpec::kappa(double nu) const {
  for (const auto& band : bands)
    if (nu > band.nu_lo && nu < band.nu_hi) return band.kappa;
  return baseline(nu);
}

std::vector<double> BandSpec::breakpoints() const {
  auto out = baseline.breakpoints();
  for (const auto& band : bands) {
    out.push_back(band.nu_lo);
    out.push_back(band.nu_hi);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Band> read_band_file(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  const auto lo = t.column("nu_lo"), hi = t.column("nu_hi"), k = t.column("kappa");
  std::vector<Band> bands;
  for (const auto& row : t.rows) bands.push_back({row[lo], row[hi], row[k]});
  BandSpec{KappaSpectrum::grey(0.0), bands}.validate();
  return bands;
}

KappaSpectrum read_kappa_table(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  const auto cn = t.column("nu"), ck = t.column("kappa");
  std::vector<double> nu, kappa;
  for (const auto& row : t.rows) {
    nu.push_back(row[cn]);
    kappa.push_back(row[ck]);
  }
  return KappaSpectrum::from_samples(nu, kappa);
}

void AtmosphereModel::validate() const {
  const auto P = static_cast<Eigen::Index>(n_freq()), K = static_cast<Eigen::Index>(n_levels());
  for (const auto* m : {&kappa, &albedo, &beta, &b})
    if (m->rows() != P || m->cols() != K) throw std::invalid_argument("atmosphere: field shape mismatch");
  if (r_ground.size() != P) throw std::invalid_argument("atmosphere: r_ground shape mismatch");
  for (Eigen::Index p = 0; p < P; ++p) {
    if (r_ground(p) < 0 || r_ground(p) > 1) throw std::invalid_argument("atmosphere: r_ground outside [0,1]");
    for (Eigen::Index k = 0; k < K; ++k) {
      if (!(kappa(p, k) >= 0)) throw std::invalid_argument("atmosphere: kappa must be >= 0");
      if (albedo(p, k) < 0 || albedo(p, k) > 1) throw std::invalid_argument("atmosphere: albedo outside [0,1]");
      if (b(p, k) < 0 || b(p, k) > 1) throw std::invalid_argument("atmosphere: b outside [0,1]");
      if (std::abs(beta(p, k)) > b(p, k) + 1e-14) throw std::invalid_argument("atmosphere: |beta| must be <= b");
    }
  }
}

AtmosphereModel build_atmosphere(const OpticalColumn& column, const SpectralGrid& grid, const BandSpec& bands,
                                 const AtmosphereOptions& opts) {
  grid.validate();
  bands.validate();
  if (opts.albedo < 0 || opts.albedo > 1) throw std::invalid_argument("atmosphere.albedo: must lie in [0, 1]");
  if (opts.r_ground < 0 || opts.r_ground > 1) throw std::invalid_argument("atmosphere.r_ground: must lie in [0, 1]");
  if (opts.cloud) {
    const auto& c = *opts.cloud;
    if (!(c.z_min < c.z_max)) throw std::invalid_argument("atmosphere.cloud: z_min must be < z_max");
    if (c.amax < 0 || c.amax > 1) throw std::invalid_argument("atmosphere.cloud.amax: must lie in [0, 1]");
  }
  if (opts.rayleigh) {
    const auto& r = *opts.rayleigh;
    if (!(r.z_min < r.z_max)) throw std::invalid_argument("atmosphere.rayleigh: z_min must be < z_max");
    if (r.strength < 0 || r.strength > 1) throw std::invalid_argument("atmosphere.rayleigh.strength: must lie in [0, 1]");
  }
  if (opts.cloud && opts.rayleigh) {
    const double lo = std::max(opts.cloud->z_min, opts.rayleigh->z_min);
    const double hi = std::min(opts.cloud->z_max, opts.rayleigh->z_max);
    if (lo < hi) throw std::invalid_argument("atmosphere: cloud and Rayleigh regions overlap (contradictory b)");
  }

  const auto P = static_cast<Eigen::Index>(grid.size());
  const auto K = static_cast<Eigen::Index>(column.size());
  AtmosphereModel atm{column,
                      grid,
                      Eigen::MatrixXd(P, K),
                      Eigen::MatrixXd::Constant(P, K, opts.albedo),
                      Eigen::MatrixXd::Zero(P, K),
                      Eigen::MatrixXd::Ones(P, K),
                      Eigen::VectorXd::Constant(P, opts.r_ground)};
  for (Eigen::Index p = 0; p < P; ++p) {
    const double nu = grid.nodes[p];
    const double k_nu = bands.kappa(nu);
    for (Eigen::Index k = 0; k < K; ++k) {
      atm.kappa(p, k) = k_nu;
      const double z = column.z_nodes()[k];
      if (opts.cloud) {
        const auto& c = *opts.cloud;
        const double bump = cloud_albedo(z, c.z_min, c.z_max, c.amax);
        if (bump > 0) {
          const double a = std::min(1.0, opts.albedo + bump);
          atm.albedo(p, k) = a;
          atm.b(p, k) = 1.0;
          switch (c.beta_mode) {
            case BetaMode::none: atm.beta(p, k) = 0.0; break;
            case BetaMode::half_albedo: atm.beta(p, k) = 0.5 * a; break;
            case BetaMode::constant: atm.beta(p, k) = c.beta_value; break;
          }
        }
      }
      if (opts.rayleigh) {
        const auto& r = *opts.rayleigh;
        if (z >= r.z_min && z <= r.z_max && nu > r.nu_threshold) {
          atm.albedo(p, k) = r.strength;
          atm.b(p, k) = 0.0;
          atm.beta(p, k) = 0.0;
        }
      }
    }
  }
  atm.validate();
  return atm;
}

}  // namespace radslab
