#include "radslab/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <set>
#include <sstream>

#include "radslab/csv.hpp"

namespace radslab {

using nlohmann::json;

namespace {

/// A JSON object together with its field path, for error reporting.
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  void allow(std::initializer_list<std::string_view> keys) const {
    for (const auto& [k, v] : j_.items()) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError(field(k), "unknown field");
    }
  }

  Node object(const std::string& key) const { return Node(j_.at(key), field(key)); }

  double number(const std::string& key, double fallback) const { return has(key) ? number(key) : fallback; }
  double number(const std::string& key) const {
    require(key);
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(field(key), "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(field(key), "must be finite");
    return x;
  }
  int integer(const std::string& key, int fallback) const {
    if (!has(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
    return v.get<int>();
  }
  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(field(key), "expected true or false");
    return v.get<bool>();
  }
  std::string string(const std::string& key, const std::string& fallback) const {
    return has(key) ? string(key) : fallback;
  }
  std::string string(const std::string& key) const {
    require(key);
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(field(key), "expected a string");
    return v.get<std::string>();
  }
  std::vector<double> numbers(const std::string& key) const {
    const auto& v = array(key);
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) throw ConfigError(field(key) + "[" + std::to_string(i) + "]", "expected a number");
      out.push_back(v[i].get<double>());
    }
    return out;
  }
  const json& array(const std::string& key) const {
    require(key);
    const auto& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(field(key), "expected an array");
    return v;
  }
  const json& raw() const { return j_; }
  const std::string& path() const { return path_; }

 private:
  void require(const std::string& key) const {
    if (!has(key)) throw ConfigError(field(key), "missing required field");
  }

  const json& j_;
  std::string path_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& file) {
  std::filesystem::path p(file);
  return p.is_absolute() || base.empty() ? p : base / p;
}

std::vector<Band> parse_bands(const Node& n, const std::string& key) {
  std::vector<Band> out;
  const auto& arr = n.array(key);
  for (std::size_t i = 0; i < arr.size(); ++i) {
    Node b(arr[i], n.field(key) + "[" + std::to_string(i) + "]");
    b.allow({"nu_lo", "nu_hi", "kappa"});
    out.push_back({b.number("nu_lo"), b.number("nu_hi"), b.number("kappa")});
  }
  return out;
}

/// Bands given inline (`bands`) and/or from a CSV (`band_file`).
std::vector<Band> band_list(const Node& n, const std::filesystem::path& base) {
  std::vector<Band> out;
  if (n.has("bands")) out = parse_bands(n, "bands");
  if (n.has("band_file")) {
    try {
      auto more = read_band_file(resolve(base, n.string("band_file")));
      out.insert(out.end(), more.begin(), more.end());
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(n.field("band_file"), e.what());
    }
  }
  return out;
}

double altitude(const Node& n, const std::string& key, double fallback, double z_top, double z_top_m) {
  if (n.has(key) && n.has(key + "_m")) throw ConfigError(n.field(key), "give either " + key + " or " + key + "_m");
  if (n.has(key + "_m")) return n.number(key + "_m") / z_top_m * z_top;
  return n.number(key, fallback);
}

BetaMode beta_mode_from(const Node& n, const std::string& key, BetaMode fallback) {
  if (!n.has(key)) return fallback;
  const auto s = n.string(key);
  if (s == "none") return BetaMode::none;
  if (s == "half_albedo") return BetaMode::half_albedo;
  if (s == "constant") return BetaMode::constant;
  throw ConfigError(n.field(key), "expected none, half_albedo or constant");
}

EmitterSpec parse_emitter(const Node& n, EmitterSpec e) {
  n.allow({"enabled", "power", "temperature_K", "coefficient"});
  e.enabled = n.boolean("enabled", e.enabled);
  e.power = n.number("power", e.power);
  e.temperature_K = n.number("temperature_K", e.temperature_K);
  if (n.has("coefficient")) e.coefficient = n.number("coefficient");
  return e;
}

Scenario scenario_from_json(const json& j, const std::filesystem::path& base_dir) {
  Node root(j, "");
  root.allow({"schema_version", "name", "description", "mode", "column", "spectrum", "kappa", "variants", "scattering",
              "sources", "solver", "beta_sweep", "difference", "grid3d", "comment"});
  if (!root.has("schema_version")) throw ConfigError("schema_version", "missing required field");
  if (root.integer("schema_version", 0) != kSchemaVersion)
    throw ConfigError("schema_version", "unsupported version (expected " + std::to_string(kSchemaVersion) + ")");

  Scenario s;
  s.base_dir = base_dir;
  s.name = root.string("name");
  s.description = root.string("description", "");
  const auto mode = root.string("mode", "stratified");
  if (mode == "stratified")
    s.mode = ScenarioMode::stratified;
  else if (mode == "volumetric3d")
    s.mode = ScenarioMode::volumetric3d;
  else
    throw ConfigError("mode", "expected stratified or volumetric3d");

  if (root.has("column")) {
    auto c = root.object("column");
    c.allow({"z_top", "z_top_m", "n_tau", "density"});
    s.z_top = c.number("z_top", s.z_top);
    s.z_top_m = c.number("z_top_m", s.z_top_m);
    s.n_tau = c.integer("n_tau", s.n_tau);
    if (c.has("density")) {
      auto d = c.object("density");
      d.allow({"kind", "value", "c0", "c1", "z", "rho"});
      s.density.kind = d.string("kind", s.density.kind);
      s.density.value = d.number("value", s.density.value);
      s.density.c0 = d.number("c0", s.density.c0);
      s.density.c1 = d.number("c1", s.density.c1);
      if (d.has("z")) s.density.z = d.numbers("z");
      if (d.has("rho")) s.density.rho = d.numbers("rho");
    }
  }
  if (root.has("spectrum")) {
    auto g = root.object("spectrum");
    g.allow({"nu_max", "nu_first", "panels", "nodes_per_panel"});
    s.spectral.nu_max = g.number("nu_max", s.spectral.nu_max);
    s.spectral.nu_first = g.number("nu_first", s.spectral.nu_first);
    s.spectral.panels = g.integer("panels", s.spectral.panels);
    s.spectral.nodes_per_panel = g.integer("nodes_per_panel", s.spectral.nodes_per_panel);
  }
  if (root.has("kappa")) {
    auto k = root.object("kappa");
    k.allow({"model", "value", "file", "bands", "band_file"});
    s.kappa.model = k.string("model", s.kappa.model);
    s.kappa.value = k.number("value", s.kappa.value);
    if (k.has("file")) s.kappa.file = resolve(base_dir, k.string("file"));
    s.kappa.bands = band_list(k, base_dir);
  }
  if (root.has("variants")) {
    const auto& arr = root.array("variants");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      Node v(arr[i], "variants[" + std::to_string(i) + "]");
      v.allow({"name", "bands", "band_file", "comment"});
      s.variants.push_back({v.string("name"), band_list(v, base_dir)});
    }
  }
  if (root.has("scattering")) {
    auto sc = root.object("scattering");
    sc.allow({"albedo", "r_ground", "cloud", "rayleigh"});
    s.scattering.albedo = sc.number("albedo", s.scattering.albedo);
    s.scattering.r_ground = sc.number("r_ground", s.scattering.r_ground);
    if (sc.has("cloud")) {
      auto c = sc.object("cloud");
      c.allow({"z_min", "z_max", "z_min_m", "z_max_m", "amax", "beta_mode", "beta"});
      CloudSpec cs;
      cs.z_min = altitude(c, "z_min", 7000.0 / s.z_top_m * s.z_top, s.z_top, s.z_top_m);
      cs.z_max = altitude(c, "z_max", 9000.0 / s.z_top_m * s.z_top, s.z_top, s.z_top_m);
      cs.amax = c.number("amax", cs.amax);
      cs.beta_mode = beta_mode_from(c, "beta_mode", cs.beta_mode);
      cs.beta = c.number("beta", cs.beta);
      s.scattering.cloud = cs;
    }
    if (sc.has("rayleigh")) {
      auto r = sc.object("rayleigh");
      r.allow({"nu_threshold", "strength", "z_min", "z_max", "z_min_m", "z_max_m"});
      RayleighSpec rs;
      rs.nu_threshold = r.number("nu_threshold", rs.nu_threshold);
      rs.strength = r.number("strength", rs.strength);
      rs.z_min = altitude(r, "z_min", rs.z_min, s.z_top, s.z_top_m);
      rs.z_max = altitude(r, "z_max", s.z_top, s.z_top, s.z_top_m);
      s.scattering.rayleigh = rs;
    }
  }
  if (root.has("sources")) {
    auto so = root.object("sources");
    so.allow({"sun", "earth"});
    if (so.has("sun")) s.sources.sun = parse_emitter(so.object("sun"), s.sources.sun);
    if (so.has("earth")) s.sources.earth = parse_emitter(so.object("earth"), s.sources.earth);
  }
  if (root.has("solver")) {
    auto sv = root.object("solver");
    sv.allow({"tol", "max_iter"});
    s.solver.tol = sv.number("tol", s.solver.tol);
    s.solver.max_iter = sv.integer("max_iter", s.solver.max_iter);
  }
  if (root.has("beta_sweep")) s.beta_sweep = root.numbers("beta_sweep");
  if (root.has("difference")) {
    try {
      s.difference = ablation_from_string(root.string("difference"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError("difference", e.what());
    }
  }
  if (root.has("grid3d")) {
    auto g = root.object("grid3d");
    g.allow({"extent", "resolution", "terrain", "wall_reflectivity", "operators"});
    Grid3DSpec gs;
    if (g.has("extent")) {
      const auto e = g.numbers("extent");
      if (e.size() != 3) throw ConfigError(g.field("extent"), "expected 3 numbers");
      gs.extent = {e[0], e[1], e[2]};
    } else {
      gs.extent[2] = s.z_top;
    }
    if (g.has("resolution")) {
      const auto& arr = g.array("resolution");
      if (arr.size() != 3) throw ConfigError(g.field("resolution"), "expected 3 integers");
      for (int a = 0; a < 3; ++a) {
        if (!arr[a].is_number_integer())
          throw ConfigError(g.field("resolution") + "[" + std::to_string(a) + "]", "expected an integer");
        gs.resolution[a] = arr[a].get<int>();
      }
    }
    if (g.has("terrain")) {
      auto t = g.object("terrain");
      t.allow({"kind", "ridge_height", "file"});
      gs.terrain.kind = t.string("kind", gs.terrain.kind);
      gs.terrain.ridge_height = t.number("ridge_height", gs.terrain.ridge_height);
      if (t.has("file")) gs.terrain.file = resolve(base_dir, t.string("file"));
    }
    gs.wall_reflectivity = g.number("wall_reflectivity", gs.wall_reflectivity);
    if (g.has("operators")) {
      auto o = g.object("operators");
      o.allow({"hierarchical", "eps", "eta", "leaf_size", "with_flux"});
      gs.operators.hierarchical = o.boolean("hierarchical", gs.operators.hierarchical);
      gs.operators.eps = o.number("eps", gs.operators.eps);
      gs.operators.eta = o.number("eta", gs.operators.eta);
      const int leaf = o.integer("leaf_size", static_cast<int>(gs.operators.leaf_size));
      if (leaf < 1) throw ConfigError(o.field("leaf_size"), "must be >= 1");
      gs.operators.leaf_size = static_cast<std::size_t>(leaf);
      gs.operators.with_flux = o.boolean("with_flux", gs.operators.with_flux);
    }
    s.grid3d = gs;
  }
  s.validate();
  return s;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
  }
}

void check_range(double v, double lo, double hi, const std::string& path) {
  if (!(v >= lo && v <= hi)) {
    std::ostringstream os;
    os << "must lie in [" << lo << ", " << hi << "]";
    throw ConfigError(path, os.str());
  }
}

void check_bands(const std::vector<Band>& bands, const std::string& path) {
  for (std::size_t i = 0; i < bands.size(); ++i) {
    const auto p = path + "[" + std::to_string(i) + "]";
    if (!(bands[i].nu_lo < bands[i].nu_hi)) throw ConfigError(p, "nu_lo must be < nu_hi");
    if (!(bands[i].nu_lo >= 0)) throw ConfigError(p + ".nu_lo", "must be >= 0");
    if (!(bands[i].kappa >= 0)) throw ConfigError(p + ".kappa", "must be >= 0");
  }
}

void check_emitter(const EmitterSpec& e, const std::string& path) {
  if (!e.enabled) return;
  if (!(e.power >= 0)) throw ConfigError(path + ".power", "must be >= 0");
  if (e.coefficient && !(*e.coefficient >= 0)) throw ConfigError(path + ".coefficient", "must be >= 0");
  if (!(e.temperature_K > 0)) throw ConfigError(path + ".temperature_K", "must be positive");
}

BandSpec band_spec(const Scenario& s, const Variant* v) {
  BandSpec b;
  if (s.kappa.model == "gemini_like")
    b.baseline = KappaSpectrum::gemini_like();
  else if (s.kappa.model == "grey")
    b.baseline = KappaSpectrum::grey(s.kappa.value);
  else
    b.baseline = read_kappa_table(s.kappa.file);
  b.bands = s.kappa.bands;
  if (v) b.bands.insert(b.bands.end(), v->bands.begin(), v->bands.end());
  std::sort(b.bands.begin(), b.bands.end(), [](const Band& x, const Band& y) { return x.nu_lo < y.nu_lo; });
  return b;
}

std::string kelvin_header(const std::string& prefix, const std::vector<CaseResult>& cases, std::size_t c) {
  return cases.size() == 1 ? prefix : prefix + "_" + cases[c].label;
}

CaseResult solve_stratified(const Scenario& s, const Variant* v, const SolveOptions& so, std::string label) {
  const auto atm = build_scenario_atmosphere(s, v);
  const auto src = s.sources.build();
  auto r = solve(atm, src, so);
  CaseResult c;
  c.label = std::move(label);
  const auto K = static_cast<Eigen::Index>(atm.n_levels());
  c.tau = Eigen::Map<const Eigen::VectorXd>(atm.column.tau_nodes().data(), K);
  c.z = Eigen::Map<const Eigen::VectorXd>(atm.column.z_nodes().data(), K);
  c.T = r.T;
  c.nu = Eigen::Map<const Eigen::VectorXd>(atm.grid.nodes.data(), static_cast<Eigen::Index>(atm.n_freq()));
  c.J_top = r.moments.J.col(K - 1);
  c.J_total = spectral_total(r.moments.J, atm.grid);
  c.report = r.report;
  c.n_unknowns = static_cast<std::size_t>(K);
  return c;
}

Terrain build_terrain(const Grid3DSpec& g) {
  if (g.terrain.kind == "flat") return Terrain::flat();
  if (g.terrain.kind == "valley") return Terrain::valley(g.extent[0], g.extent[1], g.terrain.ridge_height);
  return Terrain::from_csv(g.terrain.file);
}

struct Volume3D {
  CaseResult result;
  Problem3D problem;
  RadiationState3D state;
};

Volume3D solve_volumetric(const Scenario& s, const Variant* v, const SolveOptions& so, std::string label) {
  const auto& g = *s.grid3d;
  VoxelGrid grid(Eigen::Vector3d(g.extent[0], g.extent[1], g.extent[2]), g.resolution, build_terrain(g));
  auto problem = make_problem(std::move(grid), build_scenario_atmosphere(s, v), s.sources.build(), g.wall_reflectivity);
  const auto ops = assemble_operators(problem, g.operators);
  auto r = solve3d(problem, ops, so);

  // Horizontal means over the active cells of every layer.
  const auto& vg = problem.grid;
  const int nz = vg.resolution()[2];
  const auto P = static_cast<Eigen::Index>(problem.atm.n_freq());
  Eigen::VectorXd Tsum = Eigen::VectorXd::Zero(nz), Jsum = Eigen::VectorXd::Zero(nz), cnt = Eigen::VectorXd::Zero(nz);
  Eigen::VectorXd Jtop = Eigen::VectorXd::Zero(P);
  double ntop = 0;
  for (std::size_t i = 0; i < vg.n_active(); ++i) {
    const int k = vg.cell_of(i)[2];
    const auto idx = static_cast<Eigen::Index>(i);
    Tsum(k) += r.state.T(idx);
    double jt = 0;
    for (Eigen::Index p = 0; p < P; ++p) jt += problem.atm.grid.weights[p] * r.state.J(idx, p);
    Jsum(k) += jt;
    cnt(k) += 1;
    if (k == nz - 1) {
      Jtop += r.state.J.row(idx).transpose();
      ntop += 1;
    }
  }
  CaseResult c;
  c.label = std::move(label);
  std::vector<Eigen::Index> layers;
  for (int k = 0; k < nz; ++k)
    if (cnt(k) > 0) layers.push_back(k);
  const auto L = static_cast<Eigen::Index>(layers.size());
  c.tau.resize(L);
  c.z.resize(L);
  c.T.resize(L);
  c.J_total.resize(L);
  for (Eigen::Index l = 0; l < L; ++l) {
    const auto k = layers[l];
    c.z(l) = (k + 0.5) * vg.spacing().z();
    c.tau(l) = problem.atm.column.tau_of_z(c.z(l));
    c.T(l) = Tsum(k) / cnt(k);
    c.J_total(l) = Jsum(k) / cnt(k);
  }
  c.nu = Eigen::Map<const Eigen::VectorXd>(problem.atm.grid.nodes.data(), P);
  c.J_top = ntop > 0 ? Eigen::VectorXd(Jtop / ntop) : Eigen::VectorXd::Zero(P);
  c.report = r.report;
  c.n_unknowns = vg.n_active();
  return {std::move(c), std::move(problem), std::move(r.state)};
}

void write_profiles(const std::filesystem::path& path, const std::vector<CaseResult>& cases, const std::string& prefix,
                    bool kelvin, const Eigen::VectorXd CaseResult::*field, RunResult& out) {
  std::vector<std::string> header{"tau", "z"};
  for (std::size_t c = 0; c < cases.size(); ++c) header.push_back(kelvin_header(prefix, cases, c));
  std::vector<std::vector<double>> rows;
  const auto& ref = cases.front();
  for (Eigen::Index k = 0; k < ref.tau.size(); ++k) {
    std::vector<double> row{ref.tau(k), ref.z(k)};
    for (const auto& c : cases) {
      const double v = (c.*field)(k);
      row.push_back(kelvin ? ScaledUnits::to_kelvin(v) : v);
    }
    rows.push_back(std::move(row));
  }
  csv::write(path, header, rows);
  out.files.push_back(path);
}

std::string report_line(const SolveReport& r) {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "iterations " << r.iterations << ", converged " << (r.converged ? "yes" : "no") << ", residual "
     << (r.residual_history.empty() ? 0.0 : r.residual_history.back()) << ", monotonicity violations "
     << r.monotonicity_violations << ", closure residual " << r.closure_residual << " (relative "
     << r.closure_residual_relative << "), wall " << r.wall_time.count() << " s";
  return os.str();
}

}  // namespace

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "everything";
    case Ablation::no_cloud: return "no_cloud";
    case Ablation::no_scattering: return "no_scattering";
    case Ablation::no_earth_albedo: return "no_earth_albedo";
    case Ablation::no_absorption: return "no_absorption";
  }
  return "everything";
}

Ablation ablation_from_string(const std::string& s) {
  for (auto a : {Ablation::none, Ablation::no_cloud, Ablation::no_scattering, Ablation::no_earth_albedo,
                 Ablation::no_absorption})
    if (to_string(a) == s) return a;
  throw std::invalid_argument("unknown ablation '" + s +
                              "' (expected everything, no_cloud, no_scattering, no_earth_albedo or no_absorption)");
}

DensityProfile DensitySpec::build() const {
  if (kind == "standard") return DensityProfile::standard();
  if (kind == "constant") return DensityProfile::constant(value);
  if (kind == "linear") return DensityProfile::linear(c0, c1);
  if (kind == "table") return DensityProfile::piecewise_linear(z, rho);
  throw ConfigError("column.density.kind", "expected standard, constant, linear or table");
}

BoundarySources SourceSpec::build() const {
  BoundarySources b;
  if (sun.enabled) {
    b.TS = ScaledUnits::to_scaled_temperature(sun.temperature_K);
    b.QS = sun.coefficient ? *sun.coefficient : calibrate_source(sun.power, b.TS);
  }
  if (earth.enabled) {
    b.TE = ScaledUnits::to_scaled_temperature(earth.temperature_K);
    b.QE = earth.coefficient ? *earth.coefficient : calibrate_source(earth.power, b.TE);
  }
  return b;
}

void Scenario::validate() const {
  if (name.empty()) throw ConfigError("name", "must not be empty");
  for (char ch : name)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-'))
      throw ConfigError("name", "only letters, digits, '_' and '-' are allowed (it becomes a file name)");
  if (!(z_top > 0)) throw ConfigError("column.z_top", "must be positive");
  if (!(z_top_m > 0)) throw ConfigError("column.z_top_m", "must be positive");
  if (n_tau < 2) throw ConfigError("column.n_tau", "must be >= 2");
  if (density.kind == "constant" && !(density.value >= 0)) throw ConfigError("column.density.value", "must be >= 0");
  if (density.kind == "table" && (density.z.size() < 2 || density.z.size() != density.rho.size()))
    throw ConfigError("column.density", "z and rho must have the same length >= 2");
  if (density.kind != "standard" && density.kind != "constant" && density.kind != "linear" && density.kind != "table")
    throw ConfigError("column.density.kind", "expected standard, constant, linear or table");
  if (!(spectral.nu_max > 0)) throw ConfigError("spectrum.nu_max", "must be positive");
  if (!(spectral.nu_first > 0 && spectral.nu_first < spectral.nu_max))
    throw ConfigError("spectrum.nu_first", "must lie in (0, nu_max)");
  if (spectral.panels < 1) throw ConfigError("spectrum.panels", "must be >= 1");
  if (spectral.nodes_per_panel < 1) throw ConfigError("spectrum.nodes_per_panel", "must be >= 1");
  if (kappa.model == "grey") {
    if (!(kappa.value >= 0)) throw ConfigError("kappa.value", "must be >= 0");
  } else if (kappa.model == "table") {
    if (kappa.file.empty()) throw ConfigError("kappa.file", "required for the table model");
    if (!std::filesystem::exists(kappa.file)) throw ConfigError("kappa.file", "no such file: " + kappa.file.string());
  } else if (kappa.model != "gemini_like") {
    throw ConfigError("kappa.model", "expected gemini_like, grey or table");
  }
  check_bands(kappa.bands, "kappa.bands");
  std::set<std::string> names;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto p = "variants[" + std::to_string(i) + "]";
    if (variants[i].name.empty()) throw ConfigError(p + ".name", "must not be empty");
    if (!names.insert(variants[i].name).second) throw ConfigError(p + ".name", "duplicate variant name");
    check_bands(variants[i].bands, p + ".bands");
  }
  check_range(scattering.albedo, 0, 1, "scattering.albedo");
  check_range(scattering.r_ground, 0, 1, "scattering.r_ground");
  if (scattering.cloud) {
    const auto& c = *scattering.cloud;
    if (!(c.z_min < c.z_max)) throw ConfigError("scattering.cloud", "z_min must be below z_max");
    check_range(c.amax, 0, 1, "scattering.cloud.amax");
    if (c.beta_mode == BetaMode::constant) check_range(c.beta, -1, 1, "scattering.cloud.beta");
  }
  if (scattering.rayleigh) {
    const auto& r = *scattering.rayleigh;
    if (!(r.z_min < r.z_max)) throw ConfigError("scattering.rayleigh", "z_min must be below z_max");
    check_range(r.strength, 0, 1, "scattering.rayleigh.strength");
    if (!(r.nu_threshold >= 0)) throw ConfigError("scattering.rayleigh.nu_threshold", "must be >= 0");
  }
  check_emitter(sources.sun, "sources.sun");
  check_emitter(sources.earth, "sources.earth");
  if (!(solver.tol > 0)) throw ConfigError("solver.tol", "must be positive");
  if (solver.max_iter < 1) throw ConfigError("solver.max_iter", "must be >= 1");
  if (!beta_sweep.empty() && !scattering.cloud) throw ConfigError("beta_sweep", "needs scattering.cloud");
  for (std::size_t i = 0; i < beta_sweep.size(); ++i)
    check_range(beta_sweep[i], -1, 1, "beta_sweep[" + std::to_string(i) + "]");
  if (difference && *difference == Ablation::none) throw ConfigError("difference", "must name an ablation");

  if (mode == ScenarioMode::volumetric3d) {
    if (!grid3d) throw ConfigError("grid3d", "required in volumetric3d mode");
    const auto& g = *grid3d;
    for (int a = 0; a < 3; ++a) {
      if (!(g.extent[a] > 0)) throw ConfigError("grid3d.extent", "must be positive");
      if (g.resolution[a] < 2) throw ConfigError("grid3d.resolution", "must be >= 2");
    }
    if (std::abs(g.extent[2] - z_top) > 1e-12 * z_top) throw ConfigError("grid3d.extent", "height must equal column.z_top");
    check_range(g.wall_reflectivity, 0, 1, "grid3d.wall_reflectivity");
    if (g.terrain.kind == "file") {
      if (!std::filesystem::exists(g.terrain.file))
        throw ConfigError("grid3d.terrain.file", "no such file: " + g.terrain.file.string());
    } else if (g.terrain.kind != "flat" && g.terrain.kind != "valley") {
      throw ConfigError("grid3d.terrain.kind", "expected flat, valley or file");
    }
    if (!(g.operators.eps > 0)) throw ConfigError("grid3d.operators.eps", "must be positive");
    if (!(g.operators.eta > 0)) throw ConfigError("grid3d.operators.eta", "must be positive");
  } else if (grid3d) {
    throw ConfigError("grid3d", "only allowed in volumetric3d mode");
  }

  // Atmosphere preconditions (overlaps, phase-function guard, band overlaps).
  try {
    if (variants.empty())
      build_scenario_atmosphere(*this, nullptr);
    else
      for (const auto& v : variants) build_scenario_atmosphere(*this, &v);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("atmosphere", e.what());
  }
  if (mode == ScenarioMode::volumetric3d) {
    SpectralGridOptions go = spectral;
    go.breakpoints = band_spec(*this, variants.empty() ? nullptr : &variants.front()).breakpoints();
    if (make_spectral_grid(go).size() > 8)
      throw ConfigError("spectrum", "volumetric3d runs allow at most 8 frequency channels");
  }
}

Scenario Scenario::ablated(Ablation a) const {
  Scenario s = *this;
  s.difference.reset();
  switch (a) {
    case Ablation::none: break;
    case Ablation::no_cloud: s.scattering.cloud.reset(); break;
    case Ablation::no_scattering:
      s.scattering.albedo = 0.0;
      s.scattering.cloud.reset();
      s.scattering.rayleigh.reset();
      s.beta_sweep.clear();
      break;
    case Ablation::no_earth_albedo: s.scattering.r_ground = 0.0; break;
    case Ablation::no_absorption:
      s.kappa.model = "grey";
      s.kappa.value = 0.0;
      s.kappa.bands.clear();
      for (auto& v : s.variants) v.bands.clear();
      break;
  }
  return s;
}

Scenario parse_scenario(const std::string& json_text, const std::filesystem::path& base_dir) {
  return scenario_from_json(parse_json(json_text), base_dir);
}

Scenario load_scenario(const std::filesystem::path& path) {
  return parse_scenario(read_text(path), path.parent_path());
}

AtmosphereModel build_scenario_atmosphere(const Scenario& s, const Variant* v) {
  const auto bands = band_spec(s, v);
  SpectralGridOptions go = s.spectral;
  go.breakpoints = bands.breakpoints();
  const auto grid = make_spectral_grid(go);
  const auto column = build_column(s.density.build(), s.z_top, s.n_tau);
  AtmosphereOptions ao;
  ao.albedo = s.scattering.albedo;
  ao.r_ground = s.scattering.r_ground;
  if (s.scattering.cloud) {
    const auto& c = *s.scattering.cloud;
    ao.cloud = CloudParams{c.z_min, c.z_max, c.amax, c.beta_mode, c.beta};
  }
  if (s.scattering.rayleigh) {
    const auto& r = *s.scattering.rayleigh;
    ao.rayleigh = RayleighParams{r.nu_threshold, r.strength, r.z_min, r.z_max};
  }
  return build_atmosphere(column, grid, bands, ao);
}

RunResult run(const Scenario& s, const RunOptions& opts) {
  s.validate();
  SolveOptions so = s.solver;
  if (opts.tol) so.tol = *opts.tol;
  if (opts.max_iter) so.max_iter = *opts.max_iter;

  struct Job {
    const Variant* variant;
    std::optional<double> beta;
    std::string label;
  };
  std::vector<Job> jobs;
  std::vector<const Variant*> vs;
  if (s.variants.empty())
    vs.push_back(nullptr);
  else
    for (const auto& v : s.variants) vs.push_back(&v);
  for (const auto* v : vs) {
    if (s.beta_sweep.empty()) {
      jobs.push_back({v, std::nullopt, v ? v->name : std::string("base")});
      continue;
    }
    for (double b : s.beta_sweep) {
      std::ostringstream os;
      os << "beta" << b;
      jobs.push_back({v, b, v ? v->name + "_" + os.str() : os.str()});
    }
  }

  RunResult out;
  out.name = s.name;
  std::vector<Volume3D> volumes;
  auto solve_case = [&](const Scenario& sc, const Job& job) {
    Scenario c = sc;
    if (job.beta) {
      c.scattering.cloud->beta_mode = BetaMode::constant;
      c.scattering.cloud->beta = *job.beta;
    }
    if (c.mode == ScenarioMode::stratified) return solve_stratified(c, job.variant, so, job.label);
    auto v = solve_volumetric(c, job.variant, so, job.label);
    auto r = v.result;
    volumes.push_back(std::move(v));
    return r;
  };
  for (const auto& job : jobs) out.cases.push_back(solve_case(s, job));
  const std::size_t n_main_volumes = volumes.size();
  if (s.difference) {
    const Scenario abl = s.ablated(*s.difference);
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      Job job = jobs[j];
      if (job.variant) job.variant = &abl.variants[static_cast<std::size_t>(job.variant - s.variants.data())];
      out.ablated.push_back(solve_case(abl, job));
    }
  }

  std::ostringstream sum;
  sum << std::setprecision(8);
  sum << "scenario " << s.name << "\n";
  if (!s.description.empty()) sum << "description " << s.description << "\n";
  sum << "mode " << (s.mode == ScenarioMode::stratified ? "stratified" : "volumetric3d") << "\n";
  const auto src = s.sources.build();
  sum << "sources QS " << src.QS << " TS " << src.TS << " QE " << src.QE << " TE " << src.TE << "\n";
  auto describe = [&](const CaseResult& c, const std::string& tag) {
    sum << tag << c.label << ": " << report_line(c.report) << "\n";
    sum << "  unknowns " << c.n_unknowns << ", T(ground) " << ScaledUnits::to_kelvin(c.T(0)) << " K, T(top) "
        << ScaledUnits::to_kelvin(c.T(c.T.size() - 1)) << " K, int J dnu at tau=0 " << c.J_total(0)
        << ", at tau=Z " << c.J_total(c.J_total.size() - 1) << "\n";
  };
  for (const auto& c : out.cases) describe(c, "case ");
  for (const auto& c : out.ablated) describe(c, "case " + to_string(*s.difference) + "/");

  if (opts.write_files) {
    std::filesystem::create_directories(opts.out_dir);
    const auto dir = opts.out_dir;
    write_profiles(dir / (s.name + "_temperature.csv"), out.cases, "T", true, &CaseResult::T, out);
    write_profiles(dir / (s.name + "_totals.csv"), out.cases, "Jtotal", false, &CaseResult::J_total, out);
    {
      std::vector<std::string> header{"nu"};
      for (std::size_t c = 0; c < out.cases.size(); ++c) header.push_back(kelvin_header("J_at_Z", out.cases, c));
      std::vector<std::vector<double>> rows;
      const auto& nu = out.cases.front().nu;
      bool same_grid = true;
      for (const auto& c : out.cases) same_grid = same_grid && c.nu.size() == nu.size() && c.nu == nu;
      if (same_grid) {
        for (Eigen::Index p = 0; p < nu.size(); ++p) {
          std::vector<double> row{nu(p)};
          for (const auto& c : out.cases) row.push_back(c.J_top(p));
          rows.push_back(std::move(row));
        }
        const auto path = dir / (s.name + "_spectrum.csv");
        csv::write(path, header, rows);
        out.files.push_back(path);
      } else {
        // Variants with different band edges have different frequency grids.
        for (const auto& c : out.cases) {
          std::vector<std::vector<double>> r;
          for (Eigen::Index p = 0; p < c.nu.size(); ++p) r.push_back({c.nu(p), c.J_top(p)});
          const auto path = dir / (s.name + "_" + c.label + "_spectrum.csv");
          csv::write(path, {"nu", "J_at_Z"}, r);
          out.files.push_back(path);
        }
      }
    }
    if (!out.ablated.empty()) {
      std::vector<std::string> header{"tau", "z"};
      for (std::size_t c = 0; c < out.cases.size(); ++c) header.push_back(kelvin_header("dT", out.cases, c));
      std::vector<std::vector<double>> rows;
      for (Eigen::Index k = 0; k < out.cases.front().tau.size(); ++k) {
        std::vector<double> row{out.cases.front().tau(k), out.cases.front().z(k)};
        for (std::size_t c = 0; c < out.cases.size(); ++c)
          row.push_back(ScaledUnits::to_kelvin(out.ablated[c].T(k) - out.cases[c].T(k)));
        rows.push_back(std::move(row));
      }
      const auto path = dir / (s.name + "_difference.csv");
      csv::write(path, header, rows);
      out.files.push_back(path);
      sum << "difference " << to_string(*s.difference) << " minus base written to " << path.filename().string() << "\n";
    }
    for (std::size_t v = 0; v < n_main_volumes; ++v) {
      const auto& vol = volumes[v];
      const std::string stem = s.name + (n_main_volumes == 1 ? std::string() : "_" + vol.result.label);
      write_volume_csv(dir / (stem + "_volume.csv"), vol.problem, vol.state);
      write_ground_slice_csv(dir / (stem + "_ground.csv"), vol.problem, vol.state);
      out.files.push_back(dir / (stem + "_volume.csv"));
      out.files.push_back(dir / (stem + "_ground.csv"));
    }
    out.summary = sum.str();
    std::ofstream f(dir / "summary.txt");
    f << out.summary;
    out.files.push_back(dir / "summary.txt");
  } else {
    out.summary = sum.str();
  }
  return out;
}

// ---------------------------------------------------------------- families

Family parse_family(const std::string& json_text, const std::filesystem::path& base_dir) {
  const json j = parse_json(json_text);
  Node root(j, "");
  root.allow({"schema_version", "family", "base", "base_file", "rows", "columns", "reference", "comment"});
  if (root.integer("schema_version", 0) != kSchemaVersion)
    throw ConfigError("schema_version", "unsupported or missing version (expected " + std::to_string(kSchemaVersion) + ")");
  Family f;
  f.name = root.string("family");
  json base;
  std::filesystem::path base_path_dir = base_dir;
  if (root.has("base") == root.has("base_file")) throw ConfigError("base", "give exactly one of base or base_file");
  if (root.has("base")) {
    base = j.at("base");
  } else {
    const auto p = resolve(base_dir, root.string("base_file"));
    try {
      base = parse_json(read_text(p));
    } catch (const ConfigError& e) {
      throw ConfigError("base_file", e.what());
    } catch (const std::exception& e) {
      throw ConfigError("base_file", e.what());
    }
    base_path_dir = p.parent_path();
  }
  auto with_prefix = [](const std::string& prefix, const ConfigError& e) {
    return ConfigError(prefix + "." + e.path(), std::string(e.what()).substr(e.path().size() + 2));
  };
  try {
    f.base = scenario_from_json(base, base_path_dir);
  } catch (const ConfigError& e) {
    throw with_prefix("base", e);
  }
  const auto& rows = root.array("rows");
  if (rows.empty()) throw ConfigError("rows", "at least one row is required");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto p = "rows[" + std::to_string(i) + "]";
    Node r(rows[i], p);
    r.allow({"name", "patch"});
    json merged = base;
    if (r.has("patch")) merged.merge_patch(rows[i].at("patch"));
    const auto name = r.string("name");
    merged["name"] = f.base.name + "_" + name;
    try {
      f.rows.emplace_back(name, scenario_from_json(merged, base_path_dir));
    } catch (const ConfigError& e) {
      throw with_prefix(p + ".patch", e);
    }
  }
  if (root.has("columns")) {
    const auto& cols = root.array("columns");
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (!cols[i].is_string()) throw ConfigError("columns[" + std::to_string(i) + "]", "expected a string");
      try {
        f.columns.push_back(ablation_from_string(cols[i].get<std::string>()));
      } catch (const std::invalid_argument& e) {
        throw ConfigError("columns[" + std::to_string(i) + "]", e.what());
      }
    }
  } else {
    f.columns = {Ablation::none, Ablation::no_cloud, Ablation::no_scattering, Ablation::no_earth_albedo,
                 Ablation::no_absorption};
  }
  if (root.has("reference")) {
    auto ref = root.object("reference");
    ref.allow({"note", "J0", "JZ"});
    f.reference_note = ref.string("note", "");
    auto table = [&](const std::string& key) {
      std::vector<std::vector<double>> t;
      if (!ref.has(key)) return t;
      const auto& arr = ref.array(key);
      if (arr.size() != f.rows.size()) throw ConfigError(ref.field(key), "needs one entry per row");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto p = ref.field(key) + "[" + std::to_string(i) + "]";
        if (!arr[i].is_array() || arr[i].size() != f.columns.size())
          throw ConfigError(p, "needs one number per column");
        std::vector<double> row;
        for (const auto& v : arr[i]) {
          if (!v.is_number()) throw ConfigError(p, "expected numbers");
          row.push_back(v.get<double>());
        }
        t.push_back(std::move(row));
      }
      return t;
    };
    f.reference_J0 = table("J0");
    f.reference_JZ = table("JZ");
  }
  return f;
}

Family load_family(const std::filesystem::path& path) { return parse_family(read_text(path), path.parent_path()); }

IntensityReport intensity_table(const Family& f, const RunOptions& opts) {
  IntensityReport r;
  r.family = f.name;
  r.columns = f.columns;
  r.reference_J0 = f.reference_J0;
  r.reference_JZ = f.reference_JZ;
  SolveOptions base_so;
  for (const auto& [name, sc] : f.rows) {
    r.rows.push_back(name);
    std::vector<double> j0, jz;
    std::vector<SolveReport> reps;
    for (auto col : f.columns) {
      Scenario s = sc.ablated(col);
      s.variants.clear();
      s.beta_sweep.clear();
      RunOptions ro = opts;
      ro.write_files = false;
      const auto res = run(s, ro);
      const auto& c = res.cases.front();
      if (!c.report.converged)
        throw std::runtime_error("intensity_table: " + name + "/" + to_string(col) + " did not converge");
      j0.push_back(c.J_total(0));
      jz.push_back(c.J_total(c.J_total.size() - 1));
      reps.push_back(c.report);
    }
    r.J0.push_back(std::move(j0));
    r.JZ.push_back(std::move(jz));
    r.reports.push_back(std::move(reps));
  }
  if (opts.write_files) {
    std::filesystem::create_directories(opts.out_dir);
    write_intensity_table(opts.out_dir / (f.name + "_intensity_table.csv"), r);
    std::ofstream sum(opts.out_dir / "summary.txt");
    sum << std::setprecision(8);
    sum << "family " << f.name << "\n";
    for (std::size_t i = 0; i < r.rows.size(); ++i)
      for (std::size_t c = 0; c < r.columns.size(); ++c) {
        sum << r.rows[i] << "/" << to_string(r.columns[c]) << ": " << report_line(r.reports[i][c]) << "\n";
        sum << "  int J dnu at tau=0 " << r.J0[i][c] << ", at tau=Z " << r.JZ[i][c];
        if (!r.reference_J0.empty()) sum << " (published " << r.reference_J0[i][c] << ", " << r.reference_JZ[i][c] << ")";
        sum << "\n";
      }
    if (!f.reference_note.empty()) sum << "reference: " << f.reference_note << "\n";
  }
  return r;
}

void write_intensity_table(const std::filesystem::path& path, const IntensityReport& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "row,level";
  for (auto c : r.columns) out << "," << to_string(c);
  out << "\n";
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    for (int level = 0; level < 2; ++level) {
      out << r.rows[i] << "," << (level == 0 ? "tau=0" : "tau=Z");
      const auto& t = level == 0 ? r.J0[i] : r.JZ[i];
      for (double v : t) out << "," << csv::format(v);
      out << "\n";
    }
  }
}

}  // namespace radslab
