#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "radslab/atmosphere.hpp"
#include "radslab/radiometry.hpp"
#include "radslab/stratified.hpp"
#include "radslab/transport3d.hpp"

namespace radslab {

inline constexpr int kSchemaVersion = 1;

/// Configuration error carrying the offending field path, e.g. `sources.sun.power`.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::runtime_error(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

enum class ScenarioMode { stratified, volumetric3d };

enum class Ablation { none, no_cloud, no_scattering, no_earth_albedo, no_absorption };

std::string to_string(Ablation a);
Ablation ablation_from_string(const std::string& s);

struct DensitySpec {
  std::string kind = "standard";  // standard | constant | linear | table
  double value = 1.0;
  double c0 = 1.0;
  double c1 = -0.75;
  std::vector<double> z, rho;

  DensityProfile build() const;
};

struct KappaSpec {
  std::string model = "gemini_like";  // gemini_like | grey | table
  double value = 0.45;
  std::filesystem::path file;
  std::vector<Band> bands;
};

/// One kappa variant of a scenario (for instance the CO2 or NOx perturbation).
struct Variant {
  std::string name;
  std::vector<Band> bands;
};

/// Altitudes are scaled; configs may give them in meters (`z_min_m`), which
/// are converted with the scenario's `z_top_m`.
struct CloudSpec {
  double z_min = 7000.0 / 12000.0;
  double z_max = 9000.0 / 12000.0;
  double amax = 0.3;
  BetaMode beta_mode = BetaMode::half_albedo;
  double beta = 0.0;
};

struct RayleighSpec {
  double nu_threshold = 3.0;
  double strength = 0.3;
  double z_min = 0.75;
  double z_max = 1.0;
};

struct ScatteringSpec {
  double albedo = 0.0;
  double r_ground = 0.3;
  std::optional<CloudSpec> cloud;
  std::optional<RayleighSpec> rayleigh;
};

struct EmitterSpec {
  bool enabled = true;
  double power = 0.0;          // W/m^2
  double temperature_K = 0.0;
  std::optional<double> coefficient;  // overrides the calibration from power
};

struct SourceSpec {
  EmitterSpec sun{true, 80.0, 5800.0, std::nullopt};
  EmitterSpec earth{true, 300.0, 288.0, std::nullopt};

  BoundarySources build() const;
};

struct TerrainSpec {
  std::string kind = "flat";  // flat | valley | file
  double ridge_height = 0.2;
  std::filesystem::path file;
};

struct Grid3DSpec {
  std::array<double, 3> extent{4.0, 4.0, 1.0};
  std::array<int, 3> resolution{16, 16, 16};
  TerrainSpec terrain;
  double wall_reflectivity = 1.0;
  OperatorOptions operators;
};

struct Scenario {
  std::string name;
  std::string description;
  ScenarioMode mode = ScenarioMode::stratified;
  double z_top = 1.0;
  double z_top_m = 12000.0;  // physical height of z_top, for cloud altitudes in meters
  DensitySpec density;
  int n_tau = 128;
  SpectralGridOptions spectral;
  KappaSpec kappa;
  std::vector<Variant> variants;  // empty: one run with the base bands
  ScatteringSpec scattering;
  SourceSpec sources;
  SolveOptions solver;
  std::vector<double> beta_sweep;
  std::optional<Ablation> difference;  // also run this ablation and report T(ablated) - T
  std::optional<Grid3DSpec> grid3d;
  std::filesystem::path base_dir;  // relative file paths are resolved here

  /// Checks ranges and cross-field constraints; throws ConfigError.
  void validate() const;
  /// Copy with one feature switched off, exactly as if edited in the config.
  Scenario ablated(Ablation a) const;
};

/// Parses a scenario from JSON text. `base_dir` resolves relative file names.
Scenario parse_scenario(const std::string& json_text, const std::filesystem::path& base_dir = {});
Scenario load_scenario(const std::filesystem::path& path);

/// The atmosphere of one variant (bands added to the base spectrum).
AtmosphereModel build_scenario_atmosphere(const Scenario& s, const Variant* variant = nullptr);

struct RunOptions {
  std::filesystem::path out_dir = ".";
  std::optional<double> tol;
  std::optional<int> max_iter;
  bool write_files = true;
};

struct CaseResult {
  std::string label;  // variant name, beta value or ablation tag
  Eigen::VectorXd tau, z, T;
  Eigen::VectorXd nu;
  Eigen::VectorXd J_top;  // J_nu at tau = Z
  Eigen::VectorXd J_total;  // int J dnu per level
  SolveReport report;
  std::size_t n_unknowns = 0;
};

struct RunResult {
  std::string name;
  std::vector<CaseResult> cases;
  std::vector<CaseResult> ablated;  // difference partners, same order as cases
  std::vector<std::filesystem::path> files;
  std::string summary;
};

RunResult run(const Scenario& s, const RunOptions& opts = {});

/// Table 1 analog: rows are source configurations, columns ablations.
struct IntensityReport {
  std::string family;
  std::vector<std::string> rows;
  std::vector<Ablation> columns;
  std::vector<std::vector<double>> J0;  // [row][column], int J dnu at tau = 0
  std::vector<std::vector<double>> JZ;  // at tau = Z
  std::vector<std::vector<SolveReport>> reports;
  /// Published values for comparison, same layout; may be empty.
  std::vector<std::vector<double>> reference_J0, reference_JZ;
};

struct Family {
  std::string name;
  Scenario base;
  std::vector<std::pair<std::string, Scenario>> rows;
  std::vector<Ablation> columns;
  std::vector<std::vector<double>> reference_J0, reference_JZ;
  std::string reference_note;
};

Family parse_family(const std::string& json_text, const std::filesystem::path& base_dir = {});
Family load_family(const std::filesystem::path& path);

IntensityReport intensity_table(const Family& f, const RunOptions& opts = {});
void write_intensity_table(const std::filesystem::path& path, const IntensityReport& r);

}  // namespace radslab
