"""Radiative transfer in stratified and 3D atmospheres."""

from ._core import (
    AngularGrid,
    Atmosphere,
    BoundarySources,
    CaseResult,
    ConfigError,
    DOResult,
    Family,
    HMatrixBench,
    IntensityReport,
    RunResult,
    Scenario,
    SolveReport,
    StratifiedResult,
    bench_hmatrix,
    calibrate_source,
    do_reference,
    do_solve,
    expint,
    grey_slab,
    intensity_table,
    load_family,
    load_scenario,
    parse_family,
    parse_scenario,
    phase_function,
    planck,
    planck_total,
    run,
    solve,
    standard_sources,
)

__version__ = "0.1.0"
