#!/usr/bin/env python3
"""
Trace-distance bounds from the factorized / correlated split of an initial difference.

For two extended states X, Y at time t':
  D(t)  trace distance of the reduced states propagated from X and Y
  F(t)  same, propagated from (rho_X - rho_Y, aux = 0)       factorized part
  I(t)  same, propagated from (0, aux_X - aux_Y)              correlation part

The generator is linear, so D-propagation = F-propagation + I-propagation and
|I - F| <= D <= I + F. All three are advanced in one stacked solver call.

Witness flags per output time (bitmask in the CSV):
  NECESSARY_MET            upper bound above its initial value
  SUFFICIENT_MET           lower bound above its initial value
  CORRELATION_WITNESS      I above tolerance
  TRACE_DISTANCE_INCREASE  D above its initial value
"""
from __future__ import annotations
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from bath_fit import CorrelationFit
from dynamics import (DriveSpec, ExtendedState, InitialStateKind, IntegratorControls, Trajectory,
                      build_initial, integrate_many, output_grid)
from observables import CSV_FLOAT_FORMAT
from qubit_ops import trace_norm_half
from run_utils import NumericalFailure, make_log, param

log = make_log("bounds")


class Witness(enum.IntFlag):
    NONE = 0
    NECESSARY_MET = 1
    SUFFICIENT_MET = 2
    CORRELATION_WITNESS = 4
    TRACE_DISTANCE_INCREASE = 8


class SandwichViolation(NumericalFailure):
    def __init__(self, t: float, d: float, f: float, i: float):
        super().__init__(f"|I-F| <= D <= I+F broken at t={t:.6g}: D={d:.12g}, F={f:.12g}, I={i:.12g}")
        self.t = t


@dataclass
class BoundSeries:
    times: np.ndarray
    D: np.ndarray
    F: np.ndarray
    I: np.ndarray
    D0: float                     # values at t', whether or not t' is an output time
    F0: float
    I0: float = 0.0

    @property
    def upper(self) -> np.ndarray:
        return self.I + self.F

    @property
    def lower(self) -> np.ndarray:
        return np.abs(self.I - self.F)

    @property
    def upper0(self) -> float:
        return self.I0 + self.F0

    @property
    def lower0(self) -> float:
        return abs(self.I0 - self.F0)

    def to_frame(self, flags: Optional[np.ndarray] = None) -> pd.DataFrame:
        df = pd.DataFrame({"t": self.times, "D": self.D, "F": self.F, "I": self.I,
                           "upper": self.upper, "lower": self.lower})
        df["flags"] = flags if flags is not None else witness_report(self).flags
        return df

    def to_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


@dataclass
class WitnessReport:
    times: np.ndarray
    flags: np.ndarray             # int bitmask per time

    def any(self, flag: Witness) -> bool:
        return bool(np.any(self.flags & int(flag)))

    def first_time(self, flag: Witness) -> Optional[float]:
        hit = np.flatnonzero(self.flags & int(flag))
        return float(self.times[hit[0]]) if hit.size else None

    def summary(self) -> dict:
        return {f.name.lower(): self.first_time(f) for f in Witness if f is not Witness.NONE}

# --------------------------------------------------------------------------------------
# Split and propagate
# --------------------------------------------------------------------------------------
def split_difference(state_a: ExtendedState, state_b: ExtendedState,
                     fit: CorrelationFit) -> tuple[ExtendedState, ExtendedState, ExtendedState]:
    """(full difference, factorized part, correlation part) at the common time t'."""
    if state_a.t != state_b.t:
        raise ValueError(f"states must share t'; got {state_a.t} and {state_b.t}")
    full = state_a.minus(state_b)
    fact = build_initial(InitialStateKind.ZERO_AUX, fit, payload=full)
    corr = build_initial(InitialStateKind.ZERO_RHO, fit, payload=full)
    return full, fact, corr

def _half_norms(traj: Trajectory) -> np.ndarray:
    return np.array([trace_norm_half(r) for r in traj.rho])

def propagate_split(state_a: ExtendedState, state_b: ExtendedState, fit: CorrelationFit, drive: DriveSpec,
                    t_end: float, output_times: Optional[Iterable[float]] = None,
                    controls: Optional[IntegratorControls] = None) -> tuple[Trajectory, Trajectory, Trajectory]:
    full, fact, corr = split_difference(state_a, state_b, fit)
    d, f, i = integrate_many([full, fact, corr], fit, drive, t_end, controls, output_times)
    return d, f, i

def compute_F(state_a: ExtendedState, state_b: ExtendedState, fit: CorrelationFit, drive: DriveSpec,
              t_end: float, output_times: Optional[Iterable[float]] = None,
              controls: Optional[IntegratorControls] = None) -> np.ndarray:
    _, fact, _ = split_difference(state_a, state_b, fit)
    return _half_norms(integrate_many([fact], fit, drive, t_end, controls, output_times)[0])

def compute_I(state_a: ExtendedState, state_b: ExtendedState, fit: CorrelationFit, drive: DriveSpec,
              t_end: float, output_times: Optional[Iterable[float]] = None,
              controls: Optional[IntegratorControls] = None) -> np.ndarray:
    _, _, corr = split_difference(state_a, state_b, fit)
    return _half_norms(integrate_many([corr], fit, drive, t_end, controls, output_times)[0])

def bound_series(state_a: ExtendedState, state_b: ExtendedState, fit: CorrelationFit, drive: DriveSpec,
                 t_end: float, output_times: Optional[Iterable[float]] = None,
                 controls: Optional[IntegratorControls] = None,
                 sandwich_tol: Optional[float] = None) -> BoundSeries:
    """D, F and I on the output grid; t' = state_a.t is always integrated from and stored."""
    tol = float(sandwich_tol if sandwich_tol is not None else param("QB_SANDWICH_TOL"))
    t0 = state_a.t
    times = np.asarray(sorted(output_times) if output_times is not None else output_grid(t0, t_end, drive),
                       dtype=float)
    drop = 0 if times.size and times[0] <= t0 else 1
    if drop:
        times = np.concatenate([[t0], times])
    d_traj, f_traj, i_traj = propagate_split(state_a, state_b, fit, drive, t_end, times, controls)

    start = trace_norm_half(state_a.rho - state_b.rho)
    d, f, i = _half_norms(d_traj), _half_norms(f_traj), _half_norms(i_traj)
    d[0] = f[0] = start
    i[0] = 0.0
    series = BoundSeries(d_traj.times[drop:], d[drop:], f[drop:], i[drop:], D0=start, F0=start, I0=0.0)

    bad = (series.D > series.upper + tol) | (series.D < series.lower - tol)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise SandwichViolation(float(series.times[k]), float(series.D[k]), float(series.F[k]), float(series.I[k]))
    return series

# --------------------------------------------------------------------------------------
# Witnesses
# --------------------------------------------------------------------------------------
def witness_report(series: BoundSeries, witness_tol: Optional[float] = None,
                   sandwich_tol: Optional[float] = None) -> WitnessReport:
    """Flags relative to the values at t' stored on the series.

    The trace-distance threshold is witness_tol - sandwich_tol, so a lower bound
    that clears witness_tol always implies a flagged increase of D.
    """
    wtol = float(witness_tol if witness_tol is not None else param("QB_WITNESS_TOL"))
    stol = float(sandwich_tol if sandwich_tol is not None else param("QB_SANDWICH_TOL"))
    flags = np.zeros(series.times.size, dtype=int)
    if not series.times.size:
        return WitnessReport(series.times, flags)

    up, lo = series.upper, series.lower
    flags |= np.where(up > series.upper0 + wtol, int(Witness.NECESSARY_MET), 0)
    flags |= np.where(lo > series.lower0 + wtol, int(Witness.SUFFICIENT_MET), 0)
    flags |= np.where(series.I > wtol, int(Witness.CORRELATION_WITNESS), 0)
    flags |= np.where(series.D > series.D0 + (wtol - stol), int(Witness.TRACE_DISTANCE_INCREASE), 0)
    return WitnessReport(series.times, flags)

def contraction_violations(series: BoundSeries, tol: Optional[float] = None) -> np.ndarray:
    """Times where F rises above its value at t'."""
    tol = float(tol if tol is not None else param("QB_WITNESS_TOL"))
    return series.times[series.F > series.F0 + tol]

def log_report(report: WitnessReport) -> None:
    for name, t in report.summary().items():
        log(f"{name}: " + (f"first at t={t:.4g}" if t is not None else "never"))
