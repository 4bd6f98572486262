import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from bath_fit import BathSpec
from conftest import REFERENCE_BATH
from observables import preparation_error
from run_utils import ConfigError
from scenarios import (Scenario, admissible_amplitude, load_scenario, match_fit, optimize_pulse_duration,
                       prepare_and_store, pulse_error, run_bounds, run_scan, run_scenario, scenario_from_dict)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
REF_BATH_TABLE = {"xi": 0.1, "omega_c": 7.5, "beta": 10.0}


# ---------- config loading ----------
@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    scenario = load_scenario(path)
    assert scenario.name == path.stem
    assert scenario.bath.omega_c == 7.5


@pytest.mark.parametrize("doc, field", [
    ({"drive": {"amplitude": -1.0}}, "drive.amplitude"),
    ({"bath": {"xi": 0.1, "colour": 1}}, "bath.colour"),
    ({"drive": {"amplitude": 1.0, "t_off": 2.0, "pulse_area": 1.0}}, "drive.pulse_area"),
    ({"initial": {"kinds": ["A1"]}}, "initial.kinds"),
    ({"initial": {"kinds": ["A", "A"]}}, "initial.kinds"),
    ({"initial": {"state": [1.0, 1.0, 0.0]}}, "initial.state"),
    ({"fit": {"max_terms": 2.5}}, "fit.max_terms"),
    ({"integrator": {"rtol": "tight"}}, "integrator.rtol"),
    ({"optimize": {"mode": "best"}}, "optimize.mode"),
    ({"scan": {"amplitudes": [1.0], "xis": [0.1], "xi_range": [0.01, 0.1, 3]}}, "scan.xis"),
    ({"scan": {"amplitudes": [0.0], "xis": [0.1]}}, "scan.amplitudes"),
    ({"bounds": {"pair": ["A"]}}, "bounds.pair"),
    ({"output": {"times": [1.0, 2.0, 1.0]}}, "output.times"),
    ({"output": {"times": []}}, "output.times"),
    ({"output": {"times": [25.0]}}, "output.times"),
    ({"plots": {}}, "plots"),
])
def test_invalid_config_names_the_field(doc, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        scenario_from_dict(doc)


def test_unreadable_config_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_scenario(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[bath\nxi = 0.1\n")
    with pytest.raises(ConfigError, match="TOML"):
        load_scenario(bad)


def test_output_times_checked_against_both_windows():
    with pytest.raises(ConfigError, match="duplicate"):
        scenario_from_dict({"output": {"times": [0.5, 0.5]}})
    with pytest.raises(ConfigError, match=r"output\.times.*bounds\.t_end=10"):
        scenario_from_dict({"output": {"t_end": 20.0, "times": [5.0, 15.0]}, "bounds": {"t_end": 10.0}})
    s = scenario_from_dict({"output": {"t_end": 20.0, "times": [5.0, 15.0]}, "bounds": {"t_end": 15.0}})
    assert s.output.times == (5.0, 15.0)


def test_pulse_area_sets_switch_off():
    s = scenario_from_dict({"drive": {"amplitude": 2.0, "t_on": 1.0, "pulse_area": 0.5}})
    assert s.drive.t_off == pytest.approx(1.0 + 0.5 * math.pi / 2.0)
    default = scenario_from_dict({"drive": {"amplitude": 4.0}})
    assert default.drive.t_off == pytest.approx(math.pi / 4.0)
    assert scenario_from_dict({}).drive.amplitude == 0.0


def test_ranges_and_defaults():
    s = scenario_from_dict({"scan": {"amplitude_range": [0.01, 100.0, 5], "xis": [0.1]},
                            "optimize": {"grid_points": 10}})
    assert s.scan.amplitudes == pytest.approx((0.01, 0.1, 1.0, 10.0, 100.0))
    assert s.optimize.grid_points == 200
    assert s.optimize.window_for(40.0) == (0.2, 1.2)
    assert s.optimize.window_for(2.0) == (0.25, 1.5)


def test_admissible_band():
    assert admissible_amplitude(0.5) and admissible_amplitude(1.0) and admissible_amplitude(40.0)
    assert not admissible_amplitude(1.5)
    assert not admissible_amplitude(10.0)
    assert not admissible_amplitude(0.0)


def test_match_fit_checks_bath(toy_fit):
    assert match_fit(toy_fit, REFERENCE_BATH) is toy_fit
    assert match_fit(toy_fit, REFERENCE_BATH.with_xi(0.05)).bath.xi == pytest.approx(0.05)
    with pytest.raises(ConfigError, match="omega_c"):
        match_fit(toy_fit, BathSpec(xi=0.1, omega_c=5.0, beta=10.0))


# ---------- pulse optimization ----------
def closed_pulse(amplitude: float, rwa: bool) -> Scenario:
    return scenario_from_dict({"bath": {"xi": 0.0}, "drive": {"amplitude": amplitude, "rwa": rwa},
                               "initial": {"kinds": ["D"]}, "optimize": {"mode": "unitary_reference"}})


def test_rwa_pi_pulse_duration(closed_fit):
    s = closed_pulse(0.5, rwa=True)
    best = optimize_pulse_duration(s, fit=closed_fit)
    assert best.duration == pytest.approx(math.pi / 0.5, rel=1e-4)
    assert best.error < 1e-5
    assert not best.boundary_hit
    assert pulse_error(s, closed_fit, math.pi / 0.5) < 1e-6


def test_strong_field_pulse_is_about_half_as_long(closed_fit):
    best = optimize_pulse_duration(closed_pulse(40.0, rwa=False), fit=closed_fit)
    assert 0.4 * math.pi / 40.0 <= best.duration <= 0.6 * math.pi / 40.0
    assert best.reference_error == pytest.approx(best.error, abs=1e-6)


def test_optimization_needs_a_field(closed_fit):
    s = scenario_from_dict({"bath": {"xi": 0.0}, "optimize": {}})
    with pytest.raises(ConfigError, match="amplitude"):
        optimize_pulse_duration(s, fit=closed_fit)


# ---------- evolutions ----------
def test_unitary_evolution_keeps_distance(closed_fit):
    s = scenario_from_dict({"bath": {"xi": 0.0, "beta": 1.0},
                            "initial": {"kinds": ["C", "D"], "state": [1.0, 0.0, 0.0]},
                            "output": {"t_end": 5.0, "step": 0.25}})
    ts = run_scenario(s, fit=closed_fit)
    assert len(ts) == 21
    assert {"sigma_z_C", "sigma_z_D", "D_C_D"} <= set(ts.columns)
    assert np.ptp(ts["D_C_D"]) < 1e-8
    assert ts["sigma_z_D"] == pytest.approx(np.zeros(21), abs=1e-9)
    assert np.ptp(ts["bloch_x_D"]) > 1.0


def test_prepared_snapshots(toy_fit, toy_equilibrium):
    s = scenario_from_dict({"bath": REF_BATH_TABLE, "drive": {"amplitude": 0.5, "rwa": True}})
    snaps = prepare_and_store(s, fit=toy_fit, equilibrium=toy_equilibrium)
    assert sorted(snaps) == ["A", "A1", "C", "C1", "D"]
    assert len({st.t for st in snaps.values()}) == 1
    assert snaps["A"].t == pytest.approx(math.pi / 0.5)
    assert np.array_equal(snaps["A1"].rho, snaps["A"].rho)
    assert not np.any(snaps["A1"].aux) and not np.any(snaps["C1"].aux)
    assert preparation_error(snaps["D"].rho) == 0.0
    assert preparation_error(snaps["A"].rho) < 0.9


def test_bounds_need_both_snapshots(toy_fit, toy_equilibrium):
    s = scenario_from_dict({"bath": REF_BATH_TABLE, "drive": {"amplitude": 0.5, "rwa": True},
                            "bounds": {"pair": ["A", "B"], "t_end": 1.0}})
    snaps = prepare_and_store(s, fit=toy_fit, equilibrium=toy_equilibrium)
    with pytest.raises(ConfigError, match="'B'"):
        run_bounds(s, toy_fit, snaps)
    series = run_bounds(s, toy_fit, snaps, pair=("A", "C1"))
    assert series.times[0] == snaps["A"].t
    assert series.times[-1] == pytest.approx(snaps["A"].t + 1.0)


def test_bounds_reject_output_times_past_the_default_window(toy_fit, toy_equilibrium):
    s = scenario_from_dict({"bath": REF_BATH_TABLE, "drive": {"amplitude": 0.5, "rwa": True},
                            "output": {"t_end": 60.0, "times": [10.0, 50.0]}})
    snaps = prepare_and_store(s, fit=toy_fit, equilibrium=toy_equilibrium)
    with pytest.raises(ConfigError, match=r"bounds\.t_end=40"):
        run_bounds(s, toy_fit, snaps, pair=("A", "C1"))


# ---------- scan ----------
def small_scan() -> Scenario:
    return scenario_from_dict({"bath": REF_BATH_TABLE, "initial": {"kinds": ["C"]},
                               "scan": {"amplitudes": [0.5, 5.0], "xis": [0.05, 0.1]}})


def test_scan_grid(toy_fit):
    grid = run_scan(small_scan(), fit=toy_fit)
    df = grid.cells
    assert len(df) == 4
    assert (df.loc[df["amplitude"] == 5.0, "status"] == "skipped_band").all()
    ok = df[df["status"] == "ok"]
    assert len(ok) == 2
    assert (ok["error_open_opt"] <= ok["error_unitary_ref"] + 1e-6).all()
    assert np.allclose(ok["diff_initial_c"], 0.0, atol=1e-6)
    assert np.allclose(ok["distance_initial_c"], 0.0, atol=1e-6)
    assert np.allclose(ok["diff_rwa"], ok["error_unitary_ref_rwa"] - ok["error_unitary_ref"])
    assert grid.pivot("status").shape == (2, 2)


def test_scan_is_reproducible_across_workers(toy_fit):
    s = scenario_from_dict({"bath": REF_BATH_TABLE, "initial": {"kinds": ["C"]},
                            "scan": {"amplitudes": [0.5, 20.0], "xis": [0.1], "compare_rwa": False}})
    serial = run_scan(s, fit=toy_fit, threads=1).cells
    pooled = run_scan(s, fit=toy_fit, threads=2).cells
    pd.testing.assert_frame_equal(serial, pooled)


def test_scan_needs_section(toy_fit):
    with pytest.raises(ConfigError, match="scan"):
        run_scan(scenario_from_dict({"bath": REF_BATH_TABLE}), fit=toy_fit)


# ---------- reference bath ----------
def open_rwa_pulse(amplitude: float, xi: float) -> Scenario:
    return scenario_from_dict({"bath": {"xi": xi, "omega_c": 7.5, "beta": 10.0},
                               "drive": {"amplitude": amplitude, "rwa": True},
                               "initial": {"kinds": ["D"]}, "optimize": {"mode": "open_system"}})


@pytest.mark.slow
def test_open_pi_pulse_at_weak_coupling(reference_fit):
    s = open_rwa_pulse(0.5, 1e-4)
    best = optimize_pulse_duration(s, fit=match_fit(reference_fit, s.bath))
    assert best.duration == pytest.approx(math.pi / 0.5, rel=1e-2)
    assert best.error < 1e-2


@pytest.mark.slow
def test_open_pi_pulse_error_falls_with_field(reference_fit):
    errors = {}
    for amp in (0.5, 0.8):
        s = open_rwa_pulse(amp, 1e-3)
        best = optimize_pulse_duration(s, fit=match_fit(reference_fit, s.bath))
        assert best.duration == pytest.approx(math.pi / amp, rel=1e-2)
        errors[amp] = best.error
    assert errors[0.8] < errors[0.5]
    assert errors[0.8] < 1e-2


@pytest.mark.slow
def test_scan_error_falls_with_field_at_weak_coupling(reference_fit):
    s = scenario_from_dict({"bath": {"xi": 1e-4, "omega_c": 7.5, "beta": 10.0}, "initial": {"kinds": ["C"]},
                            "scan": {"amplitudes": [0.02, 0.06, 0.2], "xis": [1e-4],
                                     "compare_rwa": False, "compare_initial_c": False}})
    df = run_scan(s, fit=reference_fit).cells
    assert (df["status"] == "ok").all()
    errors = df.sort_values("amplitude")["error_open_opt"].to_numpy()
    assert np.all(np.diff(errors) < 0)
