#pragma once

#include "radslab/atmosphere.hpp"
#include "radslab/radiometry.hpp"

namespace fixture {

struct GreySlab {
  double kappa = 1.0;
  double Z = 1.0;  // constant unit density, so tau = z
  int levels = 64;
  double albedo = 0.0;
  double r = 0.0;
  double beta = 0.0;
  int panels = 2;
  int nodes_per_panel = 2;
};

inline radslab::AtmosphereModel grey_slab(const GreySlab& g) {
  using namespace radslab;
  const auto col = build_column(DensityProfile::constant(1.0), g.Z, g.levels);
  SpectralGridOptions so;
  so.panels = g.panels;
  so.nodes_per_panel = g.nodes_per_panel;
  BandSpec bands;
  bands.baseline = KappaSpectrum::grey(g.kappa);
  AtmosphereOptions ao;
  ao.albedo = g.albedo;
  ao.r_ground = g.r;
  auto atm = build_atmosphere(col, make_spectral_grid(so), bands, ao);
  atm.beta.setConstant(g.beta);
  atm.validate();
  return atm;
}

inline radslab::BoundarySources standard_sources(bool sun = true, bool earth = true) {
  using radslab::calibrate_source;
  return {sun ? calibrate_source(80, 1.209) : 0.0, earth ? calibrate_source(300, 0.06) : 0.0, sun ? 1.209 : 0.0,
          earth ? 0.06 : 0.0};
}

}  // namespace fixture
