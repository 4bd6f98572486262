#!/usr/bin/env python3
"""
Scenario layer: TOML experiment configs, pulse-duration optimization, prepared-state
snapshots, field-free / driven evolutions and the (Omega_R x xi) preparation-error scan.

Config sections (energies in Omega, times in 1/Omega):
  [bath]        xi, omega_c, beta
  [fit]         tol, max_terms, horizon, samples, seed
  [drive]       amplitude, frequency, rwa, t_on, and either t_off or pulse_area (units of pi/Omega_R)
  [initial]     kinds = ["A", "B", "C", "D"], state = "ground" | "excited" | "mixed" | [x, y, z],
                from_snapshot = true to start every kind from a stored snapshot of that name
  [output]      t_end (evolution length), samples | step | times
  [integrator]  rtol, atol, max_step, steps_per_period
  [optimize]    mode = "unitary_reference" | "open_system", window = [lo, hi] (units of pi/Omega_R),
                rel_tol, grid_points
  [equilibrate] tol, t_max, chunk
  [scan]        amplitudes | amplitude_range = [lo, hi, n], xis | xi_range = [lo, hi, n],
                compare_rwa, compare_initial_c, allow_complex_band
  [bounds]      pair = ["A", "C1"], t_end
"""
from __future__ import annotations
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from bath_fit import BathSpec, CorrelationFit, fit_correlation
from bounds import BoundSeries, bound_series
from dynamics import (FIELD_FREE, DriveSpec, ExtendedState, InitialStateKind, IntegratorControls,
                      build_initial, equilibrate, integrate_dense, integrate_many, output_grid, propagate)
from observables import CSV_FLOAT_FORMAT, TimeSeries, preparation_error, trace_distance
from qubit_ops import EXCITED, GROUND, density_from_bloch
from run_utils import ConfigError, SimulationError, make_log, param

log = make_log("scenario")

MODES = ("unitary_reference", "open_system")
DEFAULT_WINDOW = (0.25, 1.5)          # units of pi/Omega_R
STRONG_FIELD_WINDOW = (0.2, 1.2)      # used when Omega_R > STRONG_FIELD
STRONG_FIELD = 10.0
WEAK_FIELD = 1.0

# --------------------------------------------------------------------------------------
# Config types
# --------------------------------------------------------------------------------------
@dataclass(frozen=True)
class FitControls:
    tol: float = 1e-7
    max_terms: int = 6
    horizon: float = 100.0
    samples: int = 4000
    seed: int = 0

    @classmethod
    def from_defaults(cls) -> "FitControls":
        return cls(tol=param("QB_FIT_TOL"), max_terms=int(param("QB_FIT_MAX_TERMS")),
                   horizon=param("QB_FIT_HORIZON"), samples=int(param("QB_FIT_SAMPLES")))


@dataclass(frozen=True)
class EquilibrateControls:
    tol: float = 1e-10
    t_max: float = 800.0
    chunk: float = 20.0

    @classmethod
    def from_defaults(cls) -> "EquilibrateControls":
        return cls(tol=param("QB_EQ_TOL"), t_max=param("QB_EQ_TMAX"), chunk=param("QB_EQ_CHUNK"))


@dataclass(frozen=True)
class OutputSpec:
    samples: Optional[int] = None
    step: Optional[float] = None
    times: Optional[tuple[float, ...]] = None

    def grid(self, t0: float, length: float, drive: DriveSpec) -> np.ndarray:
        if self.times is not None:
            return t0 + np.asarray(sorted(self.times), dtype=float)
        if self.step is not None:
            n = int(round(length / self.step)) + 1
            return t0 + np.linspace(0.0, length, max(n, 2))
        return output_grid(t0, t0 + length, drive, samples=self.samples)


@dataclass(frozen=True)
class OptimizeSpec:
    mode: str = "unitary_reference"
    window: Optional[tuple[float, float]] = None
    rel_tol: float = 1e-6
    grid_points: int = 200

    def window_for(self, amplitude: float) -> tuple[float, float]:
        if self.window is not None:
            return self.window
        return STRONG_FIELD_WINDOW if amplitude > STRONG_FIELD else DEFAULT_WINDOW


@dataclass(frozen=True)
class ScanConfig:
    amplitudes: tuple[float, ...]
    xis: tuple[float, ...]
    compare_rwa: bool = True
    compare_initial_c: bool = True
    allow_complex_band: bool = False


@dataclass(frozen=True)
class BoundsSpec:
    pair: tuple[str, str] = ("A", "C1")
    t_end: float = 40.0


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    bath: BathSpec = field(default_factory=BathSpec)
    fit: FitControls = field(default_factory=FitControls.from_defaults)
    drive: DriveSpec = FIELD_FREE
    kinds: tuple[str, ...] = ("A",)
    state_bloch: tuple[float, float, float] = (0.0, 0.0, -1.0)
    from_snapshot: bool = False
    t_end: float = 20.0
    output: OutputSpec = field(default_factory=OutputSpec)
    integrator: IntegratorControls = field(default_factory=IntegratorControls.from_defaults)
    equilibrate: EquilibrateControls = field(default_factory=EquilibrateControls.from_defaults)
    optimize: Optional[OptimizeSpec] = None
    scan: Optional[ScanConfig] = None
    bounds: BoundsSpec = field(default_factory=BoundsSpec)

    @property
    def needs_equilibrium(self) -> bool:
        return not self.from_snapshot and any(k in ("A", "B") for k in self.kinds)

    def with_seed(self, seed: Optional[int]) -> "Scenario":
        return self if seed is None else replace(self, fit=replace(self.fit, seed=int(seed)))

    def describe(self) -> dict:
        d = self.drive
        out = {
            "scenario": self.name,
            "bath": f"xi={self.bath.xi:g} omega_c={self.bath.omega_c:g} beta={self.bath.beta:g}",
            "drive": (f"amplitude={d.amplitude:g} frequency={d.frequency:g} rwa={d.rwa} "
                      f"window=[{d.t_on:g}, {d.t_off:g}]"),
            "kinds": ",".join(self.kinds),
            "t_end": self.t_end,
        }
        if self.optimize:
            out["optimize"] = self.optimize.mode
        if self.scan:
            out["scan"] = f"{len(self.scan.amplitudes)} amplitudes x {len(self.scan.xis)} xis"
        return out

# --------------------------------------------------------------------------------------
# TOML loading / validation
# --------------------------------------------------------------------------------------
SECTIONS = {
    "bath": {"xi", "omega_c", "beta"},
    "fit": {"tol", "max_terms", "horizon", "samples", "seed"},
    "drive": {"amplitude", "frequency", "rwa", "t_on", "t_off", "pulse_area"},
    "initial": {"kinds", "state", "from_snapshot"},
    "output": {"t_end", "samples", "step", "times"},
    "integrator": {"rtol", "atol", "max_step", "steps_per_period"},
    "optimize": {"mode", "window", "rel_tol", "grid_points"},
    "equilibrate": {"tol", "t_max", "chunk"},
    "scan": {"amplitudes", "amplitude_range", "xis", "xi_range", "compare_rwa",
             "compare_initial_c", "allow_complex_band"},
    "bounds": {"pair", "t_end"},
}

def _table(doc: Mapping, name: str) -> dict:
    t = doc.get(name, {})
    if not isinstance(t, dict):
        raise ConfigError(f"{name}: expected a [{name}] table")
    unknown = set(t) - SECTIONS[name]
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}: unknown key")
    return t

def _number(t: Mapping, section: str, key: str, default=None, *, integer: bool = False,
            positive: bool = False, nonneg: bool = False):
    if key not in t:
        return default
    v = t[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{section}.{key}: expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{section}.{key}: expected an integer, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(f"{section}.{key}: must be finite")
    if positive and v <= 0:
        raise ConfigError(f"{section}.{key}: must be > 0")
    if nonneg and v < 0:
        raise ConfigError(f"{section}.{key}: must be >= 0")
    return int(v) if integer else float(v)

def _flag(t: Mapping, section: str, key: str, default: bool) -> bool:
    v = t.get(key, default)
    if not isinstance(v, bool):
        raise ConfigError(f"{section}.{key}: expected true/false, got {v!r}")
    return v

def _numbers(t: Mapping, section: str, key: str, *, length: Optional[int] = None) -> Optional[tuple]:
    if key not in t:
        return None
    v = t[key]
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ConfigError(f"{section}.{key}: expected a list of numbers")
    if length is not None and len(v) != length:
        raise ConfigError(f"{section}.{key}: expected {length} numbers, got {len(v)}")
    return tuple(float(x) for x in v)

def _axis(t: Mapping, section: str, key: str) -> tuple[float, ...]:
    values = _numbers(t, section, key)
    rng = _numbers(t, section, f"{key[:-1]}_range", length=3)
    if (values is None) == (rng is None):
        raise ConfigError(f"{section}.{key}: give exactly one of {key} or {key[:-1]}_range")
    if rng is not None:
        lo, hi, n = rng
        if lo <= 0 or hi < lo or n < 1 or int(n) != n:
            raise ConfigError(f"{section}.{key[:-1]}_range: need 0 < lo <= hi and an integer count")
        values = tuple(float(x) for x in np.geomspace(lo, hi, int(n)))
    if not values or any(v < 0 for v in values):
        raise ConfigError(f"{section}.{key}: values must be non-negative and non-empty")
    return values

def _build(section: str, cls, **kw):
    try:
        return cls(**{k: v for k, v in kw.items() if v is not None})
    except ValueError as e:
        raise ConfigError(f"{section}: {e}") from None

def _state_bloch(raw) -> tuple[float, float, float]:
    named = {"ground": (0.0, 0.0, -1.0), "excited": (0.0, 0.0, 1.0), "mixed": (0.0, 0.0, 0.0)}
    if isinstance(raw, str):
        if raw.lower() not in named:
            raise ConfigError(f"initial.state: expected one of {sorted(named)} or [x, y, z], got {raw!r}")
        return named[raw.lower()]
    vec = _numbers({"state": raw}, "initial", "state", length=3)
    if np.linalg.norm(vec) > 1 + 1e-12:
        raise ConfigError("initial.state: Bloch vector longer than 1")
    return vec

def scenario_from_dict(doc: Mapping, name: str = "scenario") -> Scenario:
    unknown = set(doc) - set(SECTIONS) - {"name"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")

    b = _table(doc, "bath")
    bath = _build("bath", BathSpec, xi=_number(b, "bath", "xi", nonneg=True),
                  omega_c=_number(b, "bath", "omega_c", positive=True),
                  beta=_number(b, "bath", "beta", positive=True))

    f = _table(doc, "fit")
    base_fit = FitControls.from_defaults()
    fit = FitControls(tol=_number(f, "fit", "tol", base_fit.tol, positive=True),
                      max_terms=_number(f, "fit", "max_terms", base_fit.max_terms, integer=True, positive=True),
                      horizon=_number(f, "fit", "horizon", base_fit.horizon, positive=True),
                      samples=_number(f, "fit", "samples", base_fit.samples, integer=True, positive=True),
                      seed=_number(f, "fit", "seed", 0, integer=True, nonneg=True))

    d = _table(doc, "drive")
    amplitude = _number(d, "drive", "amplitude", 0.0, nonneg=True)
    t_on = _number(d, "drive", "t_on", 0.0, nonneg=True)
    t_off = _number(d, "drive", "t_off")
    area = _number(d, "drive", "pulse_area", positive=True)
    if t_off is not None and area is not None:
        raise ConfigError("drive.pulse_area: give either t_off or pulse_area, not both")
    if area is not None or (t_off is None and amplitude > 0):
        if amplitude == 0:
            raise ConfigError("drive.pulse_area: needs amplitude > 0")
        t_off = t_on + (area if area is not None else 1.0) * math.pi / amplitude
    drive = _build("drive", DriveSpec, amplitude=amplitude,
                   frequency=_number(d, "drive", "frequency", 2.0, positive=True),
                   rwa=_flag(d, "drive", "rwa", False), t_on=t_on,
                   t_off=t_off if t_off is not None else t_on)

    i = _table(doc, "initial")
    from_snapshot = _flag(i, "initial", "from_snapshot", False)
    kinds = i.get("kinds", ["A"])
    if not isinstance(kinds, list) or not kinds or not all(isinstance(k, str) for k in kinds):
        raise ConfigError("initial.kinds: expected a non-empty list of names")
    kinds = tuple(k.upper() for k in kinds)
    if len(set(kinds)) != len(kinds):
        raise ConfigError("initial.kinds: duplicate entries")
    if not from_snapshot:
        for k in kinds:
            if k not in ("A", "B", "C", "D"):
                raise ConfigError(f"initial.kinds: {k!r} needs from_snapshot = true (built kinds are A, B, C, D)")
    state_bloch = _state_bloch(i["state"]) if "state" in i else (0.0, 0.0, -1.0)

    o = _table(doc, "output")
    t_end = _number(o, "output", "t_end", 20.0, nonneg=True)
    times = _numbers(o, "output", "times")
    if times is not None:
        if not times:
            raise ConfigError("output.times: expected at least one time")
        if len(set(times)) != len(times):
            raise ConfigError("output.times: duplicate entries")
        if min(times) < 0 or max(times) > t_end:
            raise ConfigError(f"output.times: every time must lie in [0, {t_end:g}]")
    output = OutputSpec(samples=_number(o, "output", "samples", integer=True, positive=True),
                        step=_number(o, "output", "step", positive=True), times=times)

    g = _table(doc, "integrator")
    base_int = IntegratorControls.from_defaults()
    integrator = _build("integrator", IntegratorControls,
                        rtol=_number(g, "integrator", "rtol", base_int.rtol, positive=True),
                        atol=_number(g, "integrator", "atol", base_int.atol, positive=True),
                        max_step=_number(g, "integrator", "max_step", base_int.max_step, positive=True),
                        steps_per_period=_number(g, "integrator", "steps_per_period",
                                                 base_int.steps_per_period, integer=True, positive=True))

    e = _table(doc, "equilibrate")
    base_eq = EquilibrateControls.from_defaults()
    eq = EquilibrateControls(tol=_number(e, "equilibrate", "tol", base_eq.tol, positive=True),
                             t_max=_number(e, "equilibrate", "t_max", base_eq.t_max, positive=True),
                             chunk=_number(e, "equilibrate", "chunk", base_eq.chunk, positive=True))

    optimize = None
    if "optimize" in doc:
        p = _table(doc, "optimize")
        mode = p.get("mode", "unitary_reference")
        if mode not in MODES:
            raise ConfigError(f"optimize.mode: expected one of {MODES}, got {mode!r}")
        window = _numbers(p, "optimize", "window", length=2)
        if window is not None and not 0 < window[0] < window[1]:
            raise ConfigError("optimize.window: need 0 < lo < hi")
        optimize = OptimizeSpec(mode=mode, window=window,
                                rel_tol=_number(p, "optimize", "rel_tol", 1e-6, positive=True),
                                grid_points=max(200, _number(p, "optimize", "grid_points", 200,
                                                             integer=True, positive=True)))

    scan = None
    if "scan" in doc:
        s = _table(doc, "scan")
        scan = ScanConfig(amplitudes=_axis(s, "scan", "amplitudes"), xis=_axis(s, "scan", "xis"),
                          compare_rwa=_flag(s, "scan", "compare_rwa", True),
                          compare_initial_c=_flag(s, "scan", "compare_initial_c", True),
                          allow_complex_band=_flag(s, "scan", "allow_complex_band", False))
        if any(a <= 0 for a in scan.amplitudes):
            raise ConfigError("scan.amplitudes: every amplitude must be > 0")

    bd = _table(doc, "bounds")
    pair = bd.get("pair", ["A", "C1"])
    if not isinstance(pair, list) or len(pair) != 2 or not all(isinstance(x, str) for x in pair):
        raise ConfigError("bounds.pair: expected two snapshot names")
    bounds = BoundsSpec(pair=(pair[0].upper(), pair[1].upper()),
                        t_end=_number(bd, "bounds", "t_end", 40.0, positive=True))
    if "bounds" in doc and times is not None and max(times) > bounds.t_end:
        raise ConfigError(f"output.times: every time must lie in [0, bounds.t_end={bounds.t_end:g}]")

    return Scenario(name=str(doc.get("name", name)), bath=bath, fit=fit, drive=drive, kinds=kinds,
                    state_bloch=state_bloch, from_snapshot=from_snapshot, t_end=t_end, output=output,
                    integrator=integrator, equilibrate=eq, optimize=optimize, scan=scan, bounds=bounds)

def load_scenario(path: Path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: not valid TOML ({e})") from None
    return scenario_from_dict(doc, name=path.stem)

# --------------------------------------------------------------------------------------
# Shared steps
# --------------------------------------------------------------------------------------
def resolve_fit(scenario: Scenario, fit_path: Optional[Path] = None, bath: Optional[BathSpec] = None) -> CorrelationFit:
    """Fit the scenario's bath, or load a stored fit and rescale it to the scenario's xi."""
    bath = bath or scenario.bath
    if fit_path is None:
        c = scenario.fit
        return fit_correlation(bath, c.horizon, c.tol, c.max_terms, samples=c.samples, seed=c.seed)
    fit = CorrelationFit.load(fit_path)
    return match_fit(fit, bath)

def match_fit(fit: CorrelationFit, bath: BathSpec) -> CorrelationFit:
    ref = fit.bath
    if ref is None:
        return fit
    if not (math.isclose(ref.omega_c, bath.omega_c) and math.isclose(ref.beta, bath.beta)):
        raise ConfigError(f"fit: stored fit is for omega_c={ref.omega_c:g}, beta={ref.beta:g}; "
                          f"scenario has omega_c={bath.omega_c:g}, beta={bath.beta:g}")
    if math.isclose(ref.xi, bath.xi):
        return fit
    if ref.xi == 0:
        raise ConfigError("fit: a fit taken at xi = 0 cannot be rescaled")
    log(f"rescaling fit from xi={ref.xi:g} to xi={bath.xi:g}")
    return fit.scaled(bath.xi / ref.xi)

def equilibrium_for(scenario: Scenario, fit: CorrelationFit) -> ExtendedState:
    e = scenario.equilibrate
    return equilibrate(fit, e.tol, e.t_max, beta=scenario.bath.beta, chunk=e.chunk,
                       controls=scenario.integrator)

def initial_state(kind: str, scenario: Scenario, fit: CorrelationFit,
                  equilibrium: Optional[ExtendedState] = None) -> ExtendedState:
    if kind == "D":
        return build_initial(InitialStateKind.D, fit, payload=density_from_bloch(*scenario.state_bloch))
    if kind in ("A", "B") and equilibrium is None:
        equilibrium = equilibrium_for(scenario, fit)
    return build_initial(kind, fit, equilibrium, beta=scenario.bath.beta)

def initial_states(scenario: Scenario, fit: CorrelationFit, equilibrium: Optional[ExtendedState] = None,
                   snapshots: Optional[Mapping[str, ExtendedState]] = None) -> dict[str, ExtendedState]:
    if scenario.from_snapshot:
        if not snapshots:
            raise ConfigError("initial.from_snapshot: no snapshot file given")
        missing = [k for k in scenario.kinds if k not in snapshots]
        if missing:
            raise ConfigError(f"initial.kinds: snapshot has no {missing[0]!r} (has {sorted(snapshots)})")
        states = {k: build_initial(InitialStateKind.PREPARED, fit, payload=snapshots[k]) for k in scenario.kinds}
        if len({s.t for s in states.values()}) > 1:
            raise ConfigError("initial.kinds: snapshots were taken at different times")
        return states
    if scenario.needs_equilibrium and equilibrium is None:
        equilibrium = equilibrium_for(scenario, fit)
    return {k: initial_state(k, scenario, fit, equilibrium) for k in scenario.kinds}

# --------------------------------------------------------------------------------------
# Pulse-duration optimization
# --------------------------------------------------------------------------------------
@dataclass(frozen=True)
class PulseOptimum:
    duration: float
    error: float                  # open-system error at duration
    mode: str
    boundary_hit: bool = False
    reference_error: Optional[float] = None   # closed-system error (unitary_reference only)


def _error_curve(start: ExtendedState, fit: CorrelationFit, drive: DriveSpec, longest: float,
                 controls: IntegratorControls) -> Callable[[float], float]:
    if start.t > drive.t_on:
        raise ConfigError(f"drive.t_on={drive.t_on:g} is before the initial time {start.t:g}")
    dense = integrate_dense(start, fit, drive.with_window(drive.t_on, drive.t_on + longest),
                            drive.t_on + longest, controls)
    return lambda d: preparation_error(dense(drive.t_on + d).rho)

def _search(curve: Callable[[float], float], lo: float, hi: float, points: int,
            rel_tol: float) -> tuple[float, float, bool]:
    grid = np.linspace(lo, hi, max(points, 200))
    errs = np.array([curve(d) for d in grid])
    k = int(np.argmin(errs))
    if k in (0, len(grid) - 1):
        return float(grid[k]), float(errs[k]), True
    res = minimize_scalar(curve, bounds=(grid[k - 1], grid[k + 1]), method="bounded",
                          options={"xatol": rel_tol * grid[k]})
    if res.fun < errs[k]:
        return float(res.x), float(res.fun), False
    return float(grid[k]), float(errs[k]), False

def pulse_error(scenario: Scenario, fit: CorrelationFit, duration: float, kind: Optional[str] = None,
                equilibrium: Optional[ExtendedState] = None) -> float:
    """Preparation error right after a pulse of the given duration."""
    d = scenario.drive
    start = initial_state(kind or scenario.kinds[0], scenario, fit, equilibrium)
    end = propagate(start, fit, d.with_window(d.t_on, d.t_on + duration), d.t_on + duration, scenario.integrator)
    return preparation_error(end.rho)

def compare_initial_c(scenario: Scenario, fit: CorrelationFit, duration: float,
                      equilibrium: Optional[ExtendedState] = None) -> dict[str, float]:
    """Errors of the first initial kind and of Initial-C after the same pulse.

    Both start from the same reduced state, so the error difference can never exceed
    the trace distance between the two prepared reduced states.
    """
    d = scenario.drive
    starts = [initial_state(k, scenario, fit, equilibrium) for k in (scenario.kinds[0], "C")]
    end = d.t_on + duration
    ends = integrate_many(starts, fit, d.with_window(d.t_on, end), end, scenario.integrator, output_times=[end])
    rho_x, rho_c = (tr.final.rho for tr in ends)
    err_x, err_c = preparation_error(rho_x), preparation_error(rho_c)
    return {"error_initial_c": err_c, "diff_initial_c": err_x - err_c,
            "distance_initial_c": trace_distance(rho_x, rho_c)}

def optimize_pulse_duration(scenario: Scenario, mode: Optional[str] = None, *, fit: Optional[CorrelationFit] = None,
                            equilibrium: Optional[ExtendedState] = None) -> PulseOptimum:
    """Duration minimizing the preparation error of |1> inside the search window.

    unitary_reference: minimize the closed-system error from the ground state, then
    report the open-system error of the scenario's first initial kind at that duration.
    open_system: minimize the open-system error of the first initial kind directly.
    """
    opt = scenario.optimize or OptimizeSpec()
    mode = mode or opt.mode
    if mode not in MODES:
        raise ConfigError(f"optimize.mode: expected one of {MODES}, got {mode!r}")
    amp = scenario.drive.amplitude
    if amp <= 0:
        raise ConfigError("drive.amplitude: pulse optimization needs amplitude > 0")
    fit = fit or resolve_fit(scenario)
    lo, hi = (w * math.pi / amp for w in opt.window_for(amp))

    if mode == "unitary_reference":
        closed = fit.scaled(0.0)
        start = build_initial(InitialStateKind.D, closed, payload=GROUND)
        curve = _error_curve(start, closed, scenario.drive, hi, scenario.integrator)
        duration, ref_err, boundary = _search(curve, lo, hi, opt.grid_points, opt.rel_tol)
        error = pulse_error(scenario, fit, duration, equilibrium=equilibrium)
    else:
        start = initial_state(scenario.kinds[0], scenario, fit, equilibrium)
        curve = _error_curve(start, fit, scenario.drive, hi, scenario.integrator)
        duration, error, boundary = _search(curve, lo, hi, opt.grid_points, opt.rel_tol)
        ref_err = None

    if boundary:
        log(f"warn: {mode} optimum at the window edge (duration={duration:.6g}, "
            f"window=[{lo:.4g}, {hi:.4g}]); widen optimize.window")
    log(f"{mode}: amplitude={amp:g} duration={duration:.8g} ({duration * amp / math.pi:.4f} pi/Omega_R) "
        f"error={error:.3e}")
    return PulseOptimum(duration, error, mode, boundary, ref_err)

def effective_drive(scenario: Scenario, fit: CorrelationFit,
                    equilibrium: Optional[ExtendedState] = None) -> DriveSpec:
    """The scenario's drive, with t_off set by [optimize] when present."""
    d = scenario.drive
    if scenario.optimize is None or d.amplitude == 0:
        return d
    best = optimize_pulse_duration(scenario, fit=fit, equilibrium=equilibrium)
    return d.with_window(d.t_on, d.t_on + best.duration)

# --------------------------------------------------------------------------------------
# Evolutions and prepared states
# --------------------------------------------------------------------------------------
def run_scenario(scenario: Scenario, fit: Optional[CorrelationFit] = None,
                 snapshots: Optional[Mapping[str, ExtendedState]] = None,
                 equilibrium: Optional[ExtendedState] = None) -> TimeSeries:
    """Propagate every initial kind together and tabulate per-kind and pairwise observables."""
    fit = fit or resolve_fit(scenario)
    if scenario.needs_equilibrium and equilibrium is None:
        equilibrium = equilibrium_for(scenario, fit)
    drive = effective_drive(scenario, fit, equilibrium)
    states = initial_states(scenario, fit, equilibrium, snapshots)
    t0 = next(iter(states.values())).t
    times = scenario.output.grid(t0, scenario.t_end, drive)
    trajs = integrate_many(list(states.values()), fit, drive, t0 + scenario.t_end, scenario.integrator, times)
    return TimeSeries.from_states(trajs[0].times, {k: tr.rho for k, tr in zip(states, trajs)})

def prepare_and_store(scenario: Scenario, fit: Optional[CorrelationFit] = None,
                      equilibrium: Optional[ExtendedState] = None) -> dict[str, ExtendedState]:
    """Pulse Initial-A and Initial-C; return Prepared A, A1, C, C1 and the ideal D at pulse-off."""
    if scenario.drive.amplitude <= 0:
        raise ConfigError("drive.amplitude: preparation needs a pulse (amplitude > 0)")
    fit = fit or resolve_fit(scenario)
    equilibrium = equilibrium or equilibrium_for(scenario, fit)
    drive = effective_drive(scenario, fit, equilibrium)
    start_a = build_initial(InitialStateKind.A, fit, equilibrium)
    start_c = build_initial(InitialStateKind.C, fit, beta=scenario.bath.beta)
    traj_a, traj_c = integrate_many([start_a, start_c], fit, drive, drive.t_off, scenario.integrator,
                                    output_times=[drive.t_off])
    prep_a, prep_c = traj_a.final, traj_c.final
    ideal = build_initial(InitialStateKind.D, fit, payload=EXCITED)
    ideal.t = prep_a.t
    snaps = {
        "A": prep_a,
        "A1": build_initial(InitialStateKind.A1, fit, payload=prep_a),
        "C": prep_c,
        "C1": build_initial(InitialStateKind.C1, fit, payload=prep_c),
        "D": ideal,
    }
    log(f"prepared at t={prep_a.t:.6g}: error A={preparation_error(prep_a.rho):.3e}, "
        f"C={preparation_error(prep_c.rho):.3e}")
    return snaps

def run_bounds(scenario: Scenario, fit: CorrelationFit, snapshots: Mapping[str, ExtendedState],
               pair: Optional[tuple[str, str]] = None) -> BoundSeries:
    x, y = pair or scenario.bounds.pair
    for name in (x, y):
        if name not in snapshots:
            raise ConfigError(f"bounds.pair: snapshot has no {name!r} (has {sorted(snapshots)})")
    a, b = snapshots[x], snapshots[y]
    t_end = a.t + scenario.bounds.t_end
    if scenario.output.times is not None and max(scenario.output.times) > scenario.bounds.t_end:
        raise ConfigError(f"output.times: every time must lie in [0, bounds.t_end={scenario.bounds.t_end:g}]")
    times = scenario.output.grid(a.t, scenario.bounds.t_end, scenario.drive)
    return bound_series(a, b, fit, scenario.drive, t_end, times, scenario.integrator)

# --------------------------------------------------------------------------------------
# Scan
# --------------------------------------------------------------------------------------
@dataclass
class ScanGrid:
    cells: pd.DataFrame

    def to_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.cells.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)

    def pivot(self, column: str) -> pd.DataFrame:
        return self.cells.pivot(index="xi", columns="amplitude", values=column)


def admissible_amplitude(amplitude: float) -> bool:
    """Outside (WEAK_FIELD, STRONG_FIELD] resonant driving is well separated from the qubit scale."""
    return 0 < amplitude <= WEAK_FIELD or amplitude > STRONG_FIELD

def _parallel_map(fn, items: list, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))

def _equilibrium_task(task):
    scenario, fit = task
    if not any(k in ("A", "B") for k in _scan_kinds(scenario)):
        return None
    try:
        return equilibrium_for(scenario, fit)
    except SimulationError as e:
        return str(e)

def _scan_kinds(scenario: Scenario) -> tuple[str, ...]:
    kinds = (scenario.kinds[0],)
    if scenario.scan and scenario.scan.compare_initial_c:
        kinds += ("C",)
    return kinds

def _scan_cell(task) -> dict:
    scenario, amplitude, xi, fit, eq = task
    scan = scenario.scan
    row = {"amplitude": amplitude, "xi": xi, "status": "ok"}
    if not scan.allow_complex_band and not admissible_amplitude(amplitude):
        row["status"] = "skipped_band"
        return row
    if isinstance(eq, str):
        row["status"] = f"error: {eq}"
        return row
    drive = DriveSpec(amplitude, scenario.drive.frequency, False, scenario.drive.t_on, scenario.drive.t_on)
    cell = replace(scenario, bath=scenario.bath.with_xi(xi), drive=drive)
    try:
        ur = optimize_pulse_duration(cell, "unitary_reference", fit=fit, equilibrium=eq)
        row.update(duration_unitary_ref=ur.duration, error_unitary_ref=ur.error,
                   closed_error_unitary_ref=ur.reference_error, boundary_unitary_ref=ur.boundary_hit)
        if scan.compare_rwa:
            rwa = optimize_pulse_duration(replace(cell, drive=drive.as_rwa()), "unitary_reference",
                                          fit=fit, equilibrium=eq)
            row.update(duration_unitary_ref_rwa=rwa.duration, error_unitary_ref_rwa=rwa.error,
                       diff_rwa=rwa.error - ur.error)
        op = optimize_pulse_duration(cell, "open_system", fit=fit, equilibrium=eq)
        row.update(duration_open_opt=op.duration, error_open_opt=op.error, boundary_open_opt=op.boundary_hit)
        if scan.compare_initial_c:
            row.update(compare_initial_c(cell, fit, op.duration, equilibrium=eq))
    except SimulationError as e:
        log(f"warn: cell amplitude={amplitude:g} xi={xi:g} failed: {e}")
        row["status"] = f"error: {e}"
    return row

def run_scan(scenario: Scenario, fit: Optional[CorrelationFit] = None, threads: int = 1) -> ScanGrid:
    """Preparation-error grid over drive amplitude x coupling.

    The kernel is fitted once and rescaled per xi; the equilibrium is computed once per xi.
    """
    scan = scenario.scan
    if scan is None:
        raise ConfigError("scan: config has no [scan] section")
    ref_bath = scenario.bath if scenario.bath.xi > 0 else scenario.bath.with_xi(max(scan.xis) or 1.0)
    fit = match_fit(fit, ref_bath) if fit is not None else resolve_fit(scenario, bath=ref_bath)

    xis = list(scan.xis)
    fits = {xi: fit.scaled(xi / ref_bath.xi) for xi in xis}
    eq_tasks = [(replace(scenario, bath=scenario.bath.with_xi(xi)), fits[xi]) for xi in xis]
    equilibria = dict(zip(xis, _parallel_map(_equilibrium_task, eq_tasks, threads)))

    cells = [(scenario, a, xi, fits[xi], equilibria[xi]) for xi in xis for a in scan.amplitudes]
    log(f"scan: {len(cells)} cells on {max(threads, 1)} worker(s)")
    rows = _parallel_map(_scan_cell, cells, threads)
    df = pd.DataFrame(rows).sort_values(["xi", "amplitude"], kind="stable").reset_index(drop=True)
    bad = int((df["status"] != "ok").sum())
    if bad:
        log(f"warn: {bad}/{len(df)} cells not ok")
    return ScanGrid(df)
