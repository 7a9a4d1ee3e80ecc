#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "radslab/bench.hpp"
#include "radslab/csv.hpp"
#include "radslab/do_oracle.hpp"
#include "radslab/scenario.hpp"

namespace {

using namespace radslab;

struct Common {
  std::optional<double> tol;
  std::optional<int> max_iter;
  std::string out = ".";
  int threads = 0;

  RunOptions run_options() const {
    RunOptions o;
    o.out_dir = out;
    o.tol = tol;
    o.max_iter = max_iter;
    return o;
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--tol", c.tol, "Convergence tolerance of the outer iteration")->check(CLI::PositiveNumber);
  app->add_option("--max-iter", c.max_iter, "Iteration cap")->check(CLI::PositiveNumber);
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--threads", c.threads, "Worker threads (0: runtime default)")->check(CLI::NonNegativeNumber);
}

void apply_threads(int threads) {
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  if (threads > 1) std::cerr << "radslab: built without OpenMP, --threads ignored\n";
#endif
}

int cmd_run(const std::string& config, const Common& c) {
  const auto s = load_scenario(config);
  const auto r = run(s, c.run_options());
  std::cout << r.summary;
  for (const auto& f : r.files) std::cout << "wrote " << f.string() << "\n";
  bool ok = true;
  for (const auto& cs : r.cases) ok = ok && cs.report.converged;
  for (const auto& cs : r.ablated) ok = ok && cs.report.converged;
  return ok ? 0 : 2;
}

int cmd_table(const std::string& config, const Common& c) {
  const auto f = load_family(config);
  const auto r = intensity_table(f, c.run_options());
  std::printf("%-10s %-6s", "row", "level");
  for (auto col : r.columns) std::printf(" %16s", to_string(col).c_str());
  std::printf("\n");
  for (std::size_t i = 0; i < r.rows.size(); ++i)
    for (int level = 0; level < 2; ++level) {
      std::printf("%-10s %-6s", r.rows[i].c_str(), level == 0 ? "tau=0" : "tau=Z");
      for (double v : level == 0 ? r.J0[i] : r.JZ[i]) std::printf(" %16.9g", v);
      std::printf("\n");
    }
  std::cout << "wrote " << (std::filesystem::path(c.out) / (f.name + "_intensity_table.csv")).string() << "\n";
  return 0;
}

int cmd_oracle(const std::string& config, const Common& c, int n_mu) {
  const auto s = load_scenario(config);
  if (s.mode != ScenarioMode::stratified) throw std::invalid_argument("oracle: only stratified scenarios");
  SolveOptions so = s.solver;
  if (c.tol) so.tol = *c.tol;
  if (c.max_iter) so.max_iter = *c.max_iter;
  const Variant* v = s.variants.empty() ? nullptr : &s.variants.front();
  const auto atm = build_scenario_atmosphere(s, v);
  const auto src = s.sources.build();
  const auto strat = solve(atm, src, so);
  const auto ref = do_reference(atm, src, n_mu);

  auto rel = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const double scale = b.cwiseAbs().maxCoeff();
    return scale > 0 ? (a - b).cwiseAbs().maxCoeff() / scale : (a - b).cwiseAbs().maxCoeff();
  };
  std::printf("scenario %s%s, %zu frequencies, %zu levels, %d and %d directions\n", s.name.c_str(),
              v ? (" (" + v->name + ")").c_str() : "", atm.n_freq(), atm.n_levels(), n_mu, 2 * n_mu);
  std::printf("max-norm relative difference J %.3e K %.3e L %.3e T %.3e\n", rel(strat.moments.J, ref.moments.J),
              rel(strat.moments.K, ref.moments.K), rel(strat.moments.L, ref.moments.L),
              rel(strat.T, ref.T));

  std::filesystem::create_directories(c.out);
  const auto path = std::filesystem::path(c.out) / (s.name + "_oracle.csv");
  const auto jt_s = spectral_total(strat.moments.J, atm.grid);
  const auto jt_o = spectral_total(ref.moments.J, atm.grid);
  std::vector<std::vector<double>> rows;
  for (std::size_t k = 0; k < atm.n_levels(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    rows.push_back({atm.column.tau_nodes()[k], ScaledUnits::to_kelvin(strat.T(i)), ScaledUnits::to_kelvin(ref.T(i)),
                    jt_s(i), jt_o(i)});
  }
  csv::write(path, {"tau", "T_integral", "T_ordinates", "Jtotal_integral", "Jtotal_ordinates"}, rows);
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

int cmd_bench(std::size_t n, double eps, bool dense) {
  const auto b = bench_hmatrix(n, eps, dense);
  std::printf("n %zu build %.4f s matvec %.6f s compression %.4f max rank %ld blocks %zu", b.n, b.build_seconds,
              b.matvec_seconds, b.compression_ratio, static_cast<long>(b.max_rank), b.blocks);
  if (b.relative_error) std::printf(" error %.3e", *b.relative_error);
  std::printf("\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Radiative transfer in stratified and 3D atmospheres"};
  app.require_subcommand(1);
  Common common;

  std::string config;
  auto* run = app.add_subcommand("run", "Solve a scenario and write its CSV reports");
  run->add_option("config", config, "Scenario JSON file")->required()->check(CLI::ExistingFile);
  add_common(run, common);

  auto* table = app.add_subcommand("table", "Intensity table of a scenario family");
  table->add_option("config", config, "Family JSON file")->required()->check(CLI::ExistingFile);
  add_common(table, common);

  int n_mu = 32;
  auto* oracle = app.add_subcommand("oracle", "Compare the integral solver with discrete ordinates");
  oracle->add_option("config", config, "Scenario JSON file")->required()->check(CLI::ExistingFile);
  oracle->add_option("--directions", n_mu, "Coarse direction count (fine uses twice as many)")
      ->capture_default_str()
      ->check(CLI::Range(8, 512));
  add_common(oracle, common);

  std::size_t n = 4096;
  double eps = 1e-8;
  bool dense = false;
  auto* bench = app.add_subcommand("bench-hmat", "Hierarchical matrix build and matvec timing");
  bench->add_option("--n", n, "Number of points")->capture_default_str()->check(CLI::Range(std::size_t{2}, std::size_t{1} << 22));
  bench->add_option("--eps", eps, "ACA tolerance")->capture_default_str()->check(CLI::PositiveNumber);
  bench->add_flag("--check-dense", dense, "Also compare against the exact product (O(N^2))");
  bench->add_option("--threads", common.threads, "Worker threads (0: runtime default)");

  CLI11_PARSE(app, argc, argv);
  apply_threads(common.threads);
  try {
    if (*run) return cmd_run(config, common);
    if (*table) return cmd_table(config, common);
    if (*oracle) return cmd_oracle(config, common, n_mu);
    if (*bench) return cmd_bench(n, eps, dense);
  } catch (const ConfigError& e) {
    std::cerr << "radslab: configuration error at " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "radslab: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
