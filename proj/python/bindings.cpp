#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "radslab/atmosphere.hpp"
#include "radslab/bench.hpp"
#include "radslab/do_oracle.hpp"
#include "radslab/radiometry.hpp"
#include "radslab/scenario.hpp"
#include "radslab/specfun.hpp"
#include "radslab/stratified.hpp"

namespace py = pybind11;
using namespace radslab;

namespace {

AtmosphereModel make_grey_slab(double kappa, double Z, int levels, double albedo, double r, double beta, int panels,
                               int nodes_per_panel) {
  const auto col = build_column(DensityProfile::constant(1.0), Z, levels);
  SpectralGridOptions so;
  so.panels = panels;
  so.nodes_per_panel = nodes_per_panel;
  BandSpec bands;
  bands.baseline = KappaSpectrum::grey(kappa);
  AtmosphereOptions ao;
  ao.albedo = albedo;
  ao.r_ground = r;
  auto atm = build_atmosphere(col, make_spectral_grid(so), bands, ao);
  atm.beta.setConstant(beta);
  atm.validate();
  return atm;
}

Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

RunOptions run_options(const std::filesystem::path& out_dir, bool write_files, std::optional<double> tol,
                       std::optional<int> max_iter) {
  RunOptions o;
  o.out_dir = out_dir;
  o.write_files = write_files;
  o.tol = tol;
  o.max_iter = max_iter;
  return o;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Radiative transfer in stratified and 3D atmospheres";

  static py::exception<ConfigError> config_error(m, "ConfigError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      py::object err = py::reinterpret_borrow<py::object>(config_error.ptr())(e.what());
      err.attr("path") = e.path();
      PyErr_SetObject(config_error.ptr(), err.ptr());
    }
  });

  m.def("expint", [](int p, double x) { return expint(p, x); }, py::arg("p"), py::arg("x"),
        "E_p(x) for p in 1..5");
  m.def("planck", &planck, py::arg("nu"), py::arg("T"));
  m.def("planck_total", &planck_total, py::arg("T"));
  m.def("calibrate_source", &calibrate_source, py::arg("power_wm2"), py::arg("T_scaled"));
  m.def("phase_function", &phase_function, py::arg("mu"), py::arg("mu_prime"), py::arg("b"), py::arg("beta"));

  py::class_<BoundarySources>(m, "BoundarySources")
      .def(py::init<double, double, double, double>(), py::arg("QS") = 0.0, py::arg("QE") = 0.0, py::arg("TS") = 0.0,
           py::arg("TE") = 0.0)
      .def_readwrite("QS", &BoundarySources::QS)
      .def_readwrite("QE", &BoundarySources::QE)
      .def_readwrite("TS", &BoundarySources::TS)
      .def_readwrite("TE", &BoundarySources::TE)
      .def("q_plus", &BoundarySources::q_plus)
      .def("q_minus", &BoundarySources::q_minus);
  m.def("standard_sources", [] {
    return BoundarySources{calibrate_source(80, 1.209), calibrate_source(300, 0.06), 1.209, 0.06};
  });

  py::class_<AtmosphereModel>(m, "Atmosphere")
      .def_property_readonly("tau", [](const AtmosphereModel& a) { return to_vector(a.column.tau_nodes()); })
      .def_property_readonly("z", [](const AtmosphereModel& a) { return to_vector(a.column.z_nodes()); })
      .def_property_readonly("nu", [](const AtmosphereModel& a) { return to_vector(a.grid.nodes); })
      .def_property_readonly("weights", [](const AtmosphereModel& a) { return to_vector(a.grid.weights); })
      .def_readwrite("kappa", &AtmosphereModel::kappa)
      .def_readwrite("albedo", &AtmosphereModel::albedo)
      .def_readwrite("beta", &AtmosphereModel::beta)
      .def_readwrite("b", &AtmosphereModel::b)
      .def("validate", &AtmosphereModel::validate);
  m.def("grey_slab", &make_grey_slab, py::arg("kappa") = 1.0, py::arg("Z") = 1.0, py::arg("levels") = 64,
        py::arg("albedo") = 0.0, py::arg("r_ground") = 0.0, py::arg("beta") = 0.0, py::arg("panels") = 6,
        py::arg("nodes_per_panel") = 4, "Grey slab of constant unit density");

  py::class_<SolveReport>(m, "SolveReport")
      .def_readonly("iterations", &SolveReport::iterations)
      .def_readonly("converged", &SolveReport::converged)
      .def_readonly("residual_history", &SolveReport::residual_history)
      .def_readonly("monotonicity_violations", &SolveReport::monotonicity_violations)
      .def_readonly("closure_residual", &SolveReport::closure_residual)
      .def_property_readonly("wall_time", [](const SolveReport& r) { return r.wall_time.count(); });

  py::class_<StratifiedResult>(m, "StratifiedResult")
      .def_property_readonly("J", [](const StratifiedResult& r) { return r.moments.J; })
      .def_property_readonly("K", [](const StratifiedResult& r) { return r.moments.K; })
      .def_property_readonly("L", [](const StratifiedResult& r) { return r.moments.L; })
      .def_readonly("T", &StratifiedResult::T)
      .def_readonly("report", &StratifiedResult::report);
  m.def(
      "solve",
      [](const AtmosphereModel& atm, const BoundarySources& src, double tol, int max_iter) {
        py::gil_scoped_release release;
        return solve(atm, src, {tol, max_iter});
      },
      py::arg("atmosphere"), py::arg("sources"), py::arg("tol") = 1e-8, py::arg("max_iter") = 200);

  py::class_<AngularGrid>(m, "AngularGrid")
      .def_static("double_gauss", &AngularGrid::double_gauss)
      .def_static("full_range", &AngularGrid::full_range)
      .def_readonly("mu", &AngularGrid::mu)
      .def_readonly("weights", &AngularGrid::weights);
  py::class_<DOResult>(m, "DOResult")
      .def_property_readonly("J", [](const DOResult& r) { return r.moments.J; })
      .def_property_readonly("K", [](const DOResult& r) { return r.moments.K; })
      .def_property_readonly("L", [](const DOResult& r) { return r.moments.L; })
      .def_readonly("T", &DOResult::T)
      .def_readonly("iterations", &DOResult::iterations)
      .def_readonly("converged", &DOResult::converged);
  m.def(
      "do_solve",
      [](const AtmosphereModel& atm, const BoundarySources& src, int directions, double tol, int max_iter) {
        py::gil_scoped_release release;
        return do_solve(atm, src, AngularGrid::double_gauss(directions), {tol, max_iter});
      },
      py::arg("atmosphere"), py::arg("sources"), py::arg("directions") = 32, py::arg("tol") = 1e-10,
      py::arg("max_iter") = 5000);
  m.def(
      "do_reference",
      [](const AtmosphereModel& atm, const BoundarySources& src, int directions) {
        py::gil_scoped_release release;
        auto ref = do_reference(atm, src, directions);
        DOResult out = std::move(ref.fine);
        out.moments = std::move(ref.moments);
        out.T = std::move(ref.T);
        return out;
      },
      py::arg("atmosphere"), py::arg("sources"), py::arg("directions") = 32,
      "Richardson extrapolation of n and 2n directions");

  py::class_<Scenario>(m, "Scenario")
      .def_readonly("name", &Scenario::name)
      .def_readonly("description", &Scenario::description)
      .def_property_readonly("volumetric", [](const Scenario& s) { return s.mode == ScenarioMode::volumetric3d; })
      .def_readonly("n_tau", &Scenario::n_tau)
      .def("ablated",
           [](const Scenario& s, const std::string& a) { return s.ablated(ablation_from_string(a)); })
      .def("atmosphere", [](const Scenario& s) { return build_scenario_atmosphere(s); })
      .def("sources", [](const Scenario& s) { return s.sources.build(); });
  m.def("parse_scenario", [](const std::string& text) { return parse_scenario(text); }, py::arg("json_text"));
  m.def("load_scenario", &load_scenario, py::arg("path"));

  py::class_<CaseResult>(m, "CaseResult")
      .def_readonly("label", &CaseResult::label)
      .def_readonly("tau", &CaseResult::tau)
      .def_readonly("z", &CaseResult::z)
      .def_readonly("T", &CaseResult::T)
      .def_readonly("nu", &CaseResult::nu)
      .def_readonly("J_top", &CaseResult::J_top)
      .def_readonly("J_total", &CaseResult::J_total)
      .def_readonly("report", &CaseResult::report);
  py::class_<RunResult>(m, "RunResult")
      .def_readonly("name", &RunResult::name)
      .def_readonly("cases", &RunResult::cases)
      .def_readonly("ablated", &RunResult::ablated)
      .def_readonly("files", &RunResult::files)
      .def_readonly("summary", &RunResult::summary);
  m.def(
      "run",
      [](const Scenario& s, const std::filesystem::path& out_dir, bool write_files, std::optional<double> tol,
         std::optional<int> max_iter) {
        py::gil_scoped_release release;
        return run(s, run_options(out_dir, write_files, tol, max_iter));
      },
      py::arg("scenario"), py::arg("out_dir") = ".", py::arg("write_files") = false, py::arg("tol") = py::none(),
      py::arg("max_iter") = py::none());

  py::class_<Family>(m, "Family")
      .def_readonly("name", &Family::name)
      .def_property_readonly("rows",
                             [](const Family& f) {
                               std::vector<std::string> names;
                               for (const auto& r : f.rows) names.push_back(r.first);
                               return names;
                             })
      .def_readonly("reference_J0", &Family::reference_J0)
      .def_readonly("reference_JZ", &Family::reference_JZ);
  m.def("parse_family", [](const std::string& text) { return parse_family(text); }, py::arg("json_text"));
  m.def("load_family", &load_family, py::arg("path"));

  py::class_<IntensityReport>(m, "IntensityReport")
      .def_readonly("family", &IntensityReport::family)
      .def_readonly("rows", &IntensityReport::rows)
      .def_property_readonly("columns",
                             [](const IntensityReport& r) {
                               std::vector<std::string> c;
                               for (auto a : r.columns) c.push_back(to_string(a));
                               return c;
                             })
      .def_readonly("J0", &IntensityReport::J0)
      .def_readonly("JZ", &IntensityReport::JZ);
  m.def(
      "intensity_table",
      [](const Family& f, const std::filesystem::path& out_dir, bool write_files) {
        py::gil_scoped_release release;
        return intensity_table(f, run_options(out_dir, write_files, std::nullopt, std::nullopt));
      },
      py::arg("family"), py::arg("out_dir") = ".", py::arg("write_files") = false);

  py::class_<HMatrixBench>(m, "HMatrixBench")
      .def_readonly("n", &HMatrixBench::n)
      .def_readonly("build_seconds", &HMatrixBench::build_seconds)
      .def_readonly("matvec_seconds", &HMatrixBench::matvec_seconds)
      .def_readonly("compression_ratio", &HMatrixBench::compression_ratio)
      .def_readonly("max_rank", &HMatrixBench::max_rank)
      .def_readonly("blocks", &HMatrixBench::blocks)
      .def_readonly("relative_error", &HMatrixBench::relative_error);
  m.def(
      "bench_hmatrix",
      [](std::size_t n, double eps, bool check_dense, int repeats) {
        py::gil_scoped_release release;
        return bench_hmatrix(n, eps, check_dense, repeats);
      },
      py::arg("n"), py::arg("eps") = 1e-8, py::arg("check_dense") = false, py::arg("repeats") = 3);
}
