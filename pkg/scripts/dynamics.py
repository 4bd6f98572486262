#!/usr/bin/env python3
"""
Extended-space propagator for the driven qubit coupled to the bath.

The time-nonlocal second-order master equation becomes, with the kernel written as
sum_k alpha_k exp(gamma_k t), the coupled local system

    d rho/dt = L_s(t) rho - i [sigma_x, sum_k (K_k + K_k^dag)]
    d K_k/dt = L_s(t) K_k + gamma_k K_k - i alpha_k sigma_x rho

with L_s(t) X = -i [H_s(t), X]. Only K_k is stored; K_k^dag is its conjugate transpose.

State layout for the ODE solver: concat(rho.ravel(), aux.ravel()), complex.
Several states may be stacked and advanced through one solver call (integrate_many);
they then share the adaptive step sequence.
"""
from __future__ import annotations
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from bath_fit import CorrelationFit
from qubit_ops import (GROUND, IDENTITY, SIGMA_MINUS, SIGMA_PLUS, SIGMA_X, SIGMA_Z,
                       QubitOperator, commutator, dagger, gibbs_state, liouville_apply, trace,
                       require_density_matrix)
from run_utils import ConfigError, NumericalFailure, make_log, param, read_json, write_json

log = make_log("dynamics")

OMEGA = 1.0            # qubit frequency; every energy is in these units
TRACE_DRIFT_TOL = 1e-8

# --------------------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------------------
@dataclass(frozen=True)
class DriveSpec:
    amplitude: float = 0.0        # Omega_R
    frequency: float = 2.0        # omega_L; resonance at 2 * OMEGA
    rwa: bool = False
    t_on: float = 0.0
    t_off: float = 0.0

    def __post_init__(self):
        if not self.amplitude >= 0:
            raise ValueError(f"drive amplitude must be >= 0, got {self.amplitude}")
        if not self.frequency > 0:
            raise ValueError(f"drive frequency must be > 0, got {self.frequency}")
        if self.t_on > self.t_off:
            raise ValueError(f"drive window needs t_on <= t_off, got [{self.t_on}, {self.t_off}]")

    @property
    def duration(self) -> float:
        return self.t_off - self.t_on

    def active(self, t: float) -> bool:
        return self.amplitude > 0 and self.t_on <= t <= self.t_off

    def fastest_period(self) -> float:
        """Shortest of the carrier and Rabi periods."""
        periods = [2 * math.pi / self.frequency]
        if self.amplitude > 0:
            periods.append(2 * math.pi / self.amplitude)
        return min(periods)

    def with_window(self, t_on: float, t_off: float) -> "DriveSpec":
        return replace(self, t_on=t_on, t_off=t_off)

    def as_rwa(self, rwa: bool = True) -> "DriveSpec":
        return replace(self, rwa=rwa)


FIELD_FREE = DriveSpec()


@dataclass(frozen=True)
class IntegratorControls:
    rtol: float = 1e-9
    atol: float = 1e-12
    max_step: float = 0.5
    steps_per_period: int = 50

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0 or self.max_step <= 0 or self.steps_per_period < 1:
            raise ValueError("integrator tolerances, max_step and steps_per_period must be positive")

    @classmethod
    def from_defaults(cls) -> "IntegratorControls":
        return cls(rtol=param("QB_RTOL"), atol=param("QB_ATOL"),
                   max_step=param("QB_MAX_STEP"), steps_per_period=int(param("QB_STEPS_PER_PERIOD")))

    def tightened(self, factor: float = 0.5) -> "IntegratorControls":
        return replace(self, rtol=self.rtol * factor, atol=self.atol * factor)


@dataclass(eq=False)
class ExtendedState:
    rho: QubitOperator
    aux: np.ndarray               # (n_terms, 2, 2)
    t: float = 0.0

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=complex).reshape(2, 2)
        self.aux = np.asarray(self.aux, dtype=complex).reshape(-1, 2, 2)

    @property
    def n_terms(self) -> int:
        return self.aux.shape[0]

    def pack(self) -> np.ndarray:
        return np.concatenate([self.rho.ravel(), self.aux.ravel()])

    @classmethod
    def unpack(cls, y: np.ndarray, n_terms: int, t: float = 0.0) -> "ExtendedState":
        y = np.asarray(y, dtype=complex)
        return cls(y[:4].reshape(2, 2).copy(), y[4:4 + 4 * n_terms].reshape(n_terms, 2, 2).copy(), t)

    def copy(self) -> "ExtendedState":
        return ExtendedState(self.rho.copy(), self.aux.copy(), self.t)

    def factorized(self) -> "ExtendedState":
        return ExtendedState(self.rho.copy(), np.zeros_like(self.aux), self.t)

    def minus(self, other: "ExtendedState") -> "ExtendedState":
        if self.aux.shape != other.aux.shape:
            raise ValueError("cannot subtract states with different aux length")
        return ExtendedState(self.rho - other.rho, self.aux - other.aux, self.t)

    def combine(self, a: complex, other: "ExtendedState", b: complex) -> "ExtendedState":
        return ExtendedState(a * self.rho + b * other.rho, a * self.aux + b * other.aux, self.t)


class InitialStateKind(str, Enum):
    A = "A"                 # correlated total equilibrium
    B = "B"                 # reduced part of A, aux = 0
    C = "C"                 # system Gibbs state, aux = 0
    D = "D"                 # given pure system state, aux = 0
    A1 = "A1"               # factorized part of a prepared A snapshot
    C1 = "C1"               # factorized part of a prepared C snapshot
    PREPARED = "PREPARED"   # stored snapshot as-is
    ZERO_RHO = "ZERO_RHO"   # rho = 0, aux from payload
    ZERO_AUX = "ZERO_AUX"   # rho from payload, aux = 0

    @classmethod
    def parse(cls, raw: str) -> "InitialStateKind":
        try:
            return cls(str(raw).upper())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ConfigError(f"initial kind must be one of {names}; got {raw!r}") from None


@dataclass
class Trajectory:
    """Sampled propagation: rho[i] and aux[i] at times[i]."""
    times: np.ndarray
    rho: np.ndarray               # (T, 2, 2)
    aux: np.ndarray               # (T, n, 2, 2)

    def __len__(self) -> int:
        return len(self.times)

    def state(self, i: int) -> ExtendedState:
        return ExtendedState(self.rho[i].copy(), self.aux[i].copy(), float(self.times[i]))

    @property
    def final(self) -> ExtendedState:
        return self.state(-1)


class StepSizeUnderflow(NumericalFailure):
    def __init__(self, t: float, max_rate: float, amplitude: float, detail: str = ""):
        super().__init__(f"integrator step size underflow at t={t:.6g} "
                         f"(max |Re gamma|={max_rate:.3g}, drive amplitude={amplitude:.3g}) {detail}".rstrip())
        self.t = t
        self.max_rate = max_rate
        self.amplitude = amplitude


class NotConverged(NumericalFailure):
    def __init__(self, t_max: float, rho_norm: float, aux_norm: float):
        super().__init__(f"no stationary state by t={t_max:g}: |d rho/dt|={rho_norm:.3g}, "
                         f"max |d K/dt|={aux_norm:.3g}")
        self.t_max = t_max
        self.rho_norm = rho_norm
        self.aux_norm = aux_norm


class SnapshotMismatch(ConfigError):
    pass

# --------------------------------------------------------------------------------------
# Generator
# --------------------------------------------------------------------------------------
def system_hamiltonian(drive: DriveSpec, t: float) -> QubitOperator:
    h = OMEGA * SIGMA_Z
    if not drive.active(t):
        return h
    w = drive.frequency * t
    if drive.rwa:
        phase = complex(math.cos(w), -math.sin(w))
        return h + 0.5 * drive.amplitude * (SIGMA_PLUS * phase + SIGMA_MINUS * phase.conjugate())
    return h + drive.amplitude * math.cos(w) * SIGMA_X

def _stacked_derivative(h: QubitOperator, rho: np.ndarray, aux: np.ndarray,
                        alphas: np.ndarray, gammas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """rho: (m, 2, 2), aux: (m, n, 2, 2)."""
    s = (aux + dagger(aux)).sum(axis=1)
    drho = liouville_apply(h, rho) - 1j * commutator(SIGMA_X, s)
    source = (SIGMA_X @ rho)[:, None]
    daux = (liouville_apply(h, aux) + gammas[:, None, None] * aux
            - 1j * alphas[:, None, None] * source)
    return drho, daux

def _check_terms(state: ExtendedState, fit: CorrelationFit) -> None:
    if state.n_terms != fit.n_terms:
        raise ValueError(f"state carries {state.n_terms} aux matrices, fit has {fit.n_terms} terms")

def rhs(state: ExtendedState, fit: CorrelationFit, drive: DriveSpec = FIELD_FREE) -> ExtendedState:
    """Time derivative of the extended state, returned as an ExtendedState."""
    _check_terms(state, fit)
    h = system_hamiltonian(drive, state.t)
    drho, daux = _stacked_derivative(h, state.rho[None], state.aux[None], fit.alphas, fit.gammas)
    return ExtendedState(drho[0], daux[0], state.t)

def derivative_norms(state: ExtendedState, fit: CorrelationFit,
                     drive: DriveSpec = FIELD_FREE) -> tuple[float, float]:
    d = rhs(state, fit, drive)
    aux_norm = float(np.abs(d.aux).reshape(d.n_terms, -1).max(axis=1).max()) if d.n_terms else 0.0
    return float(np.abs(d.rho).max()), aux_norm

# --------------------------------------------------------------------------------------
# Integration
# --------------------------------------------------------------------------------------
def _segments(t0: float, t_end: float, drive: DriveSpec) -> list[tuple[float, float]]:
    cuts = {t0, t_end}
    for edge in (drive.t_on, drive.t_off):
        if t0 < edge < t_end:
            cuts.add(edge)
    pts = sorted(cuts)
    return [(a, b) for a, b in zip(pts[:-1], pts[1:]) if b > a]

def _segment_max_step(a: float, b: float, drive: DriveSpec, controls: IntegratorControls) -> float:
    if drive.active(0.5 * (a + b)):
        return min(controls.max_step, drive.fastest_period() / controls.steps_per_period)
    return controls.max_step

def _vector_field(m: int, fit: CorrelationFit, drive: DriveSpec):
    n = fit.n_terms
    alphas, gammas = fit.alphas, fit.gammas

    def fun(t, y):
        blk = y.reshape(m, 1 + n, 2, 2)
        drho, daux = _stacked_derivative(system_hamiltonian(drive, t), blk[:, 0], blk[:, 1:], alphas, gammas)
        out = np.empty_like(blk)
        out[:, 0] = drho
        out[:, 1:] = daux
        return out.reshape(-1)
    return fun

def output_grid(t0: float, t_end: float, drive: DriveSpec = FIELD_FREE, samples: Optional[int] = None,
                per_period: Optional[int] = None) -> np.ndarray:
    """Uniform samples on [t0, t_end], densified inside the drive window."""
    samples = int(samples or param("QB_OUTPUT_SAMPLES"))
    per_period = int(per_period or param("QB_SAMPLES_PER_PERIOD"))
    grid = np.linspace(t0, t_end, max(samples, 2))
    lo, hi = max(t0, drive.t_on), min(t_end, drive.t_off)
    if drive.amplitude > 0 and hi > lo:
        n = int(math.ceil((hi - lo) / drive.fastest_period() * per_period)) + 1
        grid = np.union1d(grid, np.linspace(lo, hi, max(n, 2)))
    return grid

def integrate_many(states: Sequence[ExtendedState], fit: CorrelationFit, drive: DriveSpec,
                   t_end: float, controls: Optional[IntegratorControls] = None,
                   output_times: Optional[Iterable[float]] = None) -> list[Trajectory]:
    """Advance several states together; they share the solver's step sequence."""
    if not states:
        return []
    controls = controls or IntegratorControls.from_defaults()
    t0 = states[0].t
    m, n = len(states), fit.n_terms
    for s in states:
        _check_terms(s, fit)
        if s.t != t0:
            raise ValueError("stacked states must start at the same time")
    if t_end < t0:
        raise ValueError(f"t_end={t_end} is before the state time {t0}")

    times = np.asarray(sorted(output_times) if output_times is not None else output_grid(t0, t_end, drive),
                       dtype=float)
    if times.size and (times[0] < t0 - 1e-12 or times[-1] > t_end + 1e-12):
        raise ValueError("output times must lie within [state.t, t_end]")
    times = np.clip(times, t0, t_end)

    width = 4 * (1 + n)
    gammas = fit.gammas
    fun = _vector_field(m, fit, drive)

    y = np.concatenate([s.pack() for s in states])
    trace0 = np.array([trace(s.rho) for s in states])
    out_t: list[np.ndarray] = []
    out_y: list[np.ndarray] = []
    for a, b in _segments(t0, t_end, drive):
        mask = (times >= a) & (times < b)
        t_eval = np.append(times[mask], b)
        sol = solve_ivp(fun, (a, b), y, method="DOP853", t_eval=t_eval, rtol=controls.rtol,
                        atol=controls.atol, max_step=_segment_max_step(a, b, drive, controls))
        if sol.status < 0:
            reached = float(sol.t[-1]) if sol.t.size else a
            raise StepSizeUnderflow(reached, float(np.abs(gammas.real).max(initial=0.0)),
                                    drive.amplitude, f"({sol.message})")
        out_t.append(times[mask])
        out_y.append(sol.y[:, :-1])
        y = sol.y[:, -1]
    if times.size and times[-1] >= t_end:
        out_t.append(np.array([t_end]))
        out_y.append(y[:, None])
    if times.size and t_end == t0:
        out_t = [times]
        out_y = [np.repeat(y[:, None], times.size, axis=1)]

    all_t = np.concatenate(out_t) if out_t else np.empty(0)
    all_y = np.concatenate(out_y, axis=1) if out_y else np.empty((m * width, 0), dtype=complex)
    blk = all_y.T.reshape(len(all_t), m, 1 + n, 2, 2)

    final = y.reshape(m, 1 + n, 2, 2)
    drift = np.abs(final[:, 0, 0, 0] + final[:, 0, 1, 1] - trace0).max()
    if drift > TRACE_DRIFT_TOL:
        log(f"warn: trace drifted by {drift:.2e} over [{t0:g}, {t_end:g}]")

    return [Trajectory(all_t, blk[:, i, 0].copy(), blk[:, i, 1:].copy()) for i in range(m)]

def integrate(state: ExtendedState, fit: CorrelationFit, drive: DriveSpec, t_end: float,
              controls: Optional[IntegratorControls] = None,
              output_times: Optional[Iterable[float]] = None) -> Trajectory:
    return integrate_many([state], fit, drive, t_end, controls, output_times)[0]

@dataclass
class DenseTrajectory:
    """Continuous solution; calling it at t returns the extended state there."""
    pieces: list                  # (a, b, OdeSolution) per window segment
    n_terms: int

    @property
    def t_start(self) -> float:
        return self.pieces[0][0]

    @property
    def t_end(self) -> float:
        return self.pieces[-1][1]

    def __call__(self, t: float) -> ExtendedState:
        for a, b, sol in self.pieces:
            if a <= t <= b:
                return ExtendedState.unpack(sol(t), self.n_terms, float(t))
        raise ValueError(f"t={t} outside [{self.t_start}, {self.t_end}]")

def integrate_dense(state: ExtendedState, fit: CorrelationFit, drive: DriveSpec, t_end: float,
                    controls: Optional[IntegratorControls] = None) -> DenseTrajectory:
    controls = controls or IntegratorControls.from_defaults()
    _check_terms(state, fit)
    if t_end <= state.t:
        raise ValueError(f"t_end={t_end} must be after the state time {state.t}")
    fun = _vector_field(1, fit, drive)
    y = state.pack()
    pieces = []
    for a, b in _segments(state.t, t_end, drive):
        sol = solve_ivp(fun, (a, b), y, method="DOP853", dense_output=True, rtol=controls.rtol,
                        atol=controls.atol, max_step=_segment_max_step(a, b, drive, controls))
        if sol.status < 0:
            raise StepSizeUnderflow(float(sol.t[-1]), float(np.abs(fit.gammas.real).max(initial=0.0)),
                                    drive.amplitude, f"({sol.message})")
        pieces.append((a, b, sol.sol))
        y = sol.y[:, -1]
    return DenseTrajectory(pieces, fit.n_terms)

def propagate(state: ExtendedState, fit: CorrelationFit, drive: DriveSpec, t_end: float,
              controls: Optional[IntegratorControls] = None) -> ExtendedState:
    """Final state only."""
    return integrate(state, fit, drive, t_end, controls, output_times=[t_end]).final

# --------------------------------------------------------------------------------------
# Equilibrium
# --------------------------------------------------------------------------------------
def thermal_reduced_state(beta: float) -> QubitOperator:
    """Gibbs state of the bare qubit Hamiltonian OMEGA * sigma_z."""
    return gibbs_state(OMEGA * SIGMA_Z, beta)

def _beta_of(fit: CorrelationFit, beta: Optional[float]) -> float:
    if beta is not None:
        return float(beta)
    if fit.bath is None:
        raise ValueError("beta is required when the fit carries no bath parameters")
    return fit.bath.beta

def equilibrate(fit: CorrelationFit, tol_stationary: Optional[float] = None, t_max: Optional[float] = None, *,
                beta: Optional[float] = None, chunk: Optional[float] = None,
                controls: Optional[IntegratorControls] = None) -> ExtendedState:
    """Field-free propagation from the uncorrelated Gibbs product until the generator stalls.

    Returns the state with t reset to 0; its aux set carries the equilibrium correlations.
    """
    tol = float(tol_stationary if tol_stationary is not None else param("QB_EQ_TOL"))
    t_max = float(t_max if t_max is not None else param("QB_EQ_TMAX"))
    chunk = float(chunk if chunk is not None else param("QB_EQ_CHUNK"))
    state = build_initial(InitialStateKind.C, fit, beta=beta)
    if not np.any(fit.alphas):
        return state

    rho_norm, aux_norm = derivative_norms(state, fit)
    while max(rho_norm, aux_norm) >= tol:
        if state.t >= t_max:
            raise NotConverged(t_max, rho_norm, aux_norm)
        state = propagate(state, fit, FIELD_FREE, min(state.t + chunk, t_max), controls)
        rho_norm, aux_norm = derivative_norms(state, fit)
    log(f"equilibrium reached at t={state.t:g} (|d rho/dt|={rho_norm:.2e}, |dK/dt|={aux_norm:.2e})")
    state.t = 0.0
    return state

def _liouvillian_matrix(h: QubitOperator) -> np.ndarray:
    """Row-major vec: vec(-i[H, X]) = L @ vec(X)."""
    return -1j * (np.kron(h, IDENTITY) - np.kron(IDENTITY, h.T))

def stationary_aux(rho: QubitOperator, fit: CorrelationFit, h: Optional[QubitOperator] = None) -> np.ndarray:
    """Solve (L_s + gamma_k) K_k = i alpha_k sigma_x rho for every term at fixed rho."""
    h = OMEGA * SIGMA_Z if h is None else h
    lv = _liouvillian_matrix(h)
    src = (SIGMA_X @ rho).ravel()
    out = np.empty((fit.n_terms, 2, 2), dtype=complex)
    for k, (a, g) in enumerate(zip(fit.alphas, fit.gammas)):
        out[k] = np.linalg.solve(lv + g * np.eye(4), 1j * a * src).reshape(2, 2)
    return out

def stationary_state(fit: CorrelationFit) -> ExtendedState:
    """Unit-trace null vector of the full field-free generator.

    The generator is only real-linear (K^dag enters), so it is assembled on the
    real and imaginary parts of every component. The anti-hermitian diagonal of rho
    is conserved, so it is pinned to zero alongside the unit trace.
    """
    n = fit.n_terms
    dim = 4 * (1 + n)

    def apply(v: np.ndarray) -> np.ndarray:
        z = v[:dim] + 1j * v[dim:]
        d = rhs(ExtendedState.unpack(z, n), fit, FIELD_FREE).pack()
        return np.concatenate([d.real, d.imag])

    gen = np.column_stack([apply(e) for e in np.eye(2 * dim)])
    pins = np.zeros((3, 2 * dim))
    pins[0, [0, 3]] = 1.0           # Re tr rho = 1
    pins[1, dim] = 1.0              # Im rho00 = 0
    pins[2, dim + 3] = 1.0          # Im rho11 = 0
    lhs = np.vstack([gen, pins])
    rhs_vec = np.zeros(2 * dim + 3)
    rhs_vec[-3] = 1.0
    sol, *_ = np.linalg.lstsq(lhs, rhs_vec, rcond=None)
    return ExtendedState.unpack(sol[:dim] + 1j * sol[dim:], n)

# --------------------------------------------------------------------------------------
# Initial states
# --------------------------------------------------------------------------------------
def build_initial(kind: InitialStateKind | str, fit: CorrelationFit, equilibrium: Optional[ExtendedState] = None,
                  *, payload=None, beta: Optional[float] = None) -> ExtendedState:
    """
    A        equilibrium as-is
    B        equilibrium rho, aux = 0
    C        Gibbs state of OMEGA sigma_z, aux = 0
    D        payload rho (default ground state), aux = 0
    A1 / C1  payload snapshot rho, aux = 0
    PREPARED payload snapshot as-is
    ZERO_RHO rho = 0, aux from payload (ExtendedState or aux array)
    ZERO_AUX payload rho (or ExtendedState), aux = 0
    """
    kind = InitialStateKind.parse(kind.value if isinstance(kind, InitialStateKind) else kind)
    zeros = np.zeros((fit.n_terms, 2, 2), dtype=complex)

    if kind in (InitialStateKind.A, InitialStateKind.B):
        if equilibrium is None:
            raise ConfigError(f"initial kind {kind.value} needs an equilibrium state")
        _check_terms(equilibrium, fit)
        return equilibrium.copy() if kind is InitialStateKind.A else equilibrium.factorized()
    if kind is InitialStateKind.C:
        return ExtendedState(thermal_reduced_state(_beta_of(fit, beta)), zeros)
    if kind is InitialStateKind.D:
        rho = GROUND if payload is None else np.asarray(payload, dtype=complex)
        require_density_matrix(rho, "initial D state")
        return ExtendedState(rho.copy(), zeros)
    if kind in (InitialStateKind.A1, InitialStateKind.C1, InitialStateKind.PREPARED):
        if not isinstance(payload, ExtendedState):
            raise ConfigError(f"initial kind {kind.value} needs a stored snapshot")
        _check_terms(payload, fit)
        return payload.copy() if kind is InitialStateKind.PREPARED else payload.factorized()
    if kind is InitialStateKind.ZERO_RHO:
        aux = payload.aux if isinstance(payload, ExtendedState) else payload
        if aux is None:
            raise ConfigError("initial kind ZERO_RHO needs an aux set")
        t = payload.t if isinstance(payload, ExtendedState) else 0.0
        state = ExtendedState(np.zeros((2, 2), dtype=complex), np.array(aux, dtype=complex), t)
        _check_terms(state, fit)
        return state
    # ZERO_AUX
    if payload is None:
        raise ConfigError("initial kind ZERO_AUX needs a reduced state")
    if isinstance(payload, ExtendedState):
        return ExtendedState(payload.rho.copy(), zeros, payload.t)
    return ExtendedState(np.array(payload, dtype=complex), zeros)

# --------------------------------------------------------------------------------------
# Snapshots
# --------------------------------------------------------------------------------------
def _pairs(a: np.ndarray) -> list:
    return np.stack([a.real, a.imag], axis=-1).tolist()

def _from_pairs(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    return arr[..., 0] + 1j * arr[..., 1]

def state_to_dict(state: ExtendedState) -> dict:
    return {"t": state.t, "rho": _pairs(state.rho), "aux": _pairs(state.aux)}

def state_from_dict(d: Mapping) -> ExtendedState:
    try:
        aux = _from_pairs(d["aux"]) if len(d["aux"]) else np.zeros((0, 2, 2), dtype=complex)
        return ExtendedState(_from_pairs(d["rho"]), aux, float(d.get("t", 0.0)))
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise ConfigError(f"snapshot: malformed state ({e})") from None

def save_snapshots(path: Path, snapshots: Mapping[str, ExtendedState], fit: CorrelationFit) -> None:
    write_json(path, {
        "fit_fingerprint": fit.fingerprint(),
        "snapshots": {name: state_to_dict(s) for name, s in snapshots.items()},
    })
    log(f"snapshots {sorted(snapshots)} → {path}")

def load_snapshots(path: Path, fit: CorrelationFit) -> dict[str, ExtendedState]:
    doc = read_json(path)
    stored = doc.get("fit_fingerprint") if isinstance(doc, dict) else None
    if stored != fit.fingerprint():
        raise SnapshotMismatch(f"{path}: snapshot was taken with fit {stored}, "
                               f"current fit is {fit.fingerprint()}")
    out = {name: state_from_dict(d) for name, d in (doc.get("snapshots") or {}).items()}
    for name, s in out.items():
        if s.n_terms != fit.n_terms:
            raise SnapshotMismatch(f"{path}: snapshot {name} has {s.n_terms} aux matrices, fit has {fit.n_terms}")
    return out
