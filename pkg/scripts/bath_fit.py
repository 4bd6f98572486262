#!/usr/bin/env python3
"""
Bath kernel: ohmic spectral density, the thermal correlation function by adaptive
quadrature, and its compression into a short sum of complex exponentials

    C(t) ~= sum_k alpha_k * exp(gamma_k * t),   Re(gamma_k) <= 0.

Fit recipe:
  1) sample C(t) on a uniform grid over [0, horizon]
  2) seed the rates with a matrix-pencil (ESPRIT) estimate on decimated samples and
     with the (k-1)-term optimum grown by one rate
  3) refine the rates by variable-projection least squares (amplitudes solved
     linearly at every step), Re(gamma) bounded above by 0, then restart from
     perturbed copies of the best optimum
  4) accept the smallest k whose residual is <= tol, the residual being the squared
     2-norm on the grid with trapezoid weights (the squared L2 norm over the window)

Fits are persisted as JSON: one [Re a, Im a, Re g, Im g] row per term, plus
residual, horizon, sample count and a fingerprint that snapshots refer to.
"""
from __future__ import annotations
import hashlib
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, linalg, optimize, special

from run_utils import ConfigError, NumericalFailure, make_log, param, read_json, write_json

log = make_log("bath")

SpectralDensity = Callable[[np.ndarray], np.ndarray]

CUTOFF_MULTIPLE = 60.0      # integrate J up to 60 * omega_c
COTH_SMALL = 1e-6           # beta*omega below this uses the ohmic limit xi/beta
QUAD_EPSREL = 1e-11
QUAD_EPSABS = 1e-14
QUAD_LIMIT = 2000
QUAD_ACCEPT_REL = 1e-8
QUAD_ACCEPT_ABS = 1e-10

# --------------------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------------------
@dataclass(frozen=True)
class BathSpec:
    xi: float = 0.1          # dimensionless coupling
    omega_c: float = 7.5     # cutoff, units of Omega
    beta: float = 10.0       # inverse temperature, units of 1/Omega

    def __post_init__(self):
        if not self.xi >= 0:
            raise ValueError(f"xi must be >= 0, got {self.xi}")
        if not self.omega_c > 0:
            raise ValueError(f"omega_c must be > 0, got {self.omega_c}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")

    def with_xi(self, xi: float) -> "BathSpec":
        return BathSpec(xi=xi, omega_c=self.omega_c, beta=self.beta)


class QuadratureError(NumericalFailure):
    def __init__(self, t: float, value: complex, abserr: float):
        super().__init__(f"correlation quadrature did not converge at t={t:g}: "
                         f"value={value:.6g}, estimated error={abserr:.3g}")
        self.t = t
        self.abserr = abserr


@dataclass(frozen=True, eq=False)
class CorrelationFit:
    alphas: np.ndarray                 # complex amplitudes
    gammas: np.ndarray                 # complex rates, Re <= 0
    residual: float                    # trapezoid-weighted squared 2-norm on the grid
    horizon: float                     # fit window length, 1/Omega
    samples: int = 0
    bath: Optional[BathSpec] = None

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alphas, dtype=complex))
        g = np.atleast_1d(np.asarray(self.gammas, dtype=complex))
        if a.shape != g.shape or a.ndim != 1:
            raise ValueError("alphas and gammas must be 1-d and the same length")
        if len(g) and g.real.max() > 0:
            raise ValueError("every gamma must have Re(gamma) <= 0")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "gammas", g)

    @property
    def n_terms(self) -> int:
        return len(self.alphas)

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.exp(np.multiply.outer(t, self.gammas)) @ self.alphas

    def scaled(self, factor: float) -> "CorrelationFit":
        """Same rates, amplitudes times factor. C(t) is linear in xi."""
        bath = self.bath.with_xi(self.bath.xi * factor) if self.bath else None
        return CorrelationFit(self.alphas * factor, self.gammas.copy(),
                              self.residual * factor ** 2, self.horizon, self.samples, bath)

    def terms(self) -> list[list[float]]:
        return [[a.real, a.imag, g.real, g.imag] for a, g in zip(self.alphas, self.gammas)]

    def fingerprint(self) -> str:
        rows = [[float(f"{v:.12g}") for v in row] for row in self.terms()]
        raw = json.dumps(rows)
        return hashlib.sha1(raw.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "terms": self.terms(),
            "residual": self.residual,
            "horizon": self.horizon,
            "samples": self.samples,
            "bath": asdict(self.bath) if self.bath else None,
            "fingerprint": self.fingerprint(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorrelationFit":
        try:
            rows = np.asarray(d["terms"], dtype=float).reshape(-1, 4)
            fit = cls(rows[:, 0] + 1j * rows[:, 1], rows[:, 2] + 1j * rows[:, 3],
                      float(d["residual"]), float(d["horizon"]), int(d.get("samples", 0)),
                      BathSpec(**d["bath"]) if d.get("bath") else None)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"fit: malformed fit file ({e})") from None
        stored = d.get("fingerprint")
        if stored and stored != fit.fingerprint():
            raise ConfigError(f"fit: fingerprint {stored} does not match its terms")
        return fit

    def save(self, path: Path) -> None:
        write_json(path, self.to_dict())
        log(f"fit ({self.n_terms} terms, residual={self.residual:.3g}) → {path}")

    @classmethod
    def load(cls, path: Path) -> "CorrelationFit":
        return cls.from_dict(read_json(path))


class FitNotConverged(NumericalFailure):
    def __init__(self, best: CorrelationFit, tol: float, max_terms: int):
        super().__init__(f"no fit with <= {max_terms} terms reached residual <= {tol:g}; "
                         f"best has {best.n_terms} terms, residual {best.residual:.3g}")
        self.best = best

# --------------------------------------------------------------------------------------
# Spectral density and correlation function
# --------------------------------------------------------------------------------------
def spectral_density(spec: BathSpec, omega):
    """J(w) = (xi/2) w exp(-w/omega_c)."""
    w = np.asarray(omega, dtype=float)
    if np.any(w < 0):
        raise ValueError("spectral density is defined for omega >= 0")
    out = 0.5 * spec.xi * w * np.exp(-w / spec.omega_c)
    return float(out) if out.ndim == 0 else out

def _thermal_weight(spec: BathSpec, density: Optional[SpectralDensity]) -> Callable[[float], float]:
    """omega -> J(omega) coth(beta omega / 2) with the omega -> 0 limit handled."""
    beta = spec.beta
    if density is None:
        def f(w: float) -> float:
            if w * beta < COTH_SMALL:
                return spec.xi / beta * math.exp(-w / spec.omega_c)
            return spectral_density(spec, w) / math.tanh(0.5 * beta * w)
        return f

    eps = COTH_SMALL / beta
    def g(w: float) -> float:
        if w * beta < COTH_SMALL:
            # J(w) coth(bw/2) -> 2 J(w) / (b w); J linear near 0
            return 2.0 * float(density(max(w, eps))) / (beta * max(w, eps))
        return float(density(w)) / math.tanh(0.5 * beta * w)
    return g

def ohmic_tail_bound(spec: BathSpec, upper: float) -> float:
    """Bound on int_upper^inf J(w) coth(beta w/2) dw for the ohmic density."""
    wc = spec.omega_c
    return 0.5 * spec.xi / math.tanh(0.5 * spec.beta * upper) * wc * (upper + wc) * math.exp(-upper / wc)

def _quad(f, upper, t, weight, epsrel):
    if weight is None:
        res = integrate.quad(f, 0.0, upper, epsabs=QUAD_EPSABS, epsrel=epsrel,
                             limit=QUAD_LIMIT, full_output=1)
    else:
        res = integrate.quad(f, 0.0, upper, weight=weight, wvar=t, epsabs=QUAD_EPSABS,
                             epsrel=epsrel, limit=QUAD_LIMIT, full_output=1)
    return res[0], res[1]

def correlation_function(spec: BathSpec, t: float, *, density: Optional[SpectralDensity] = None,
                         cutoff: Optional[float] = None, epsrel: float = QUAD_EPSREL) -> complex:
    """C(t) = int_0^inf J(w) [cos(wt) coth(bw/2) - i sin(wt)] dw by adaptive quadrature."""
    t = float(t)
    if spec.xi == 0 and density is None:
        return 0j
    if t < 0:
        return complex(np.conj(correlation_function(spec, -t, density=density, cutoff=cutoff,
                                                    epsrel=epsrel)))
    upper = cutoff if cutoff is not None else CUTOFF_MULTIPLE * spec.omega_c
    jw = (lambda w: spectral_density(spec, w)) if density is None else (lambda w: float(density(w)))
    thermal = _thermal_weight(spec, density)

    if t == 0.0:
        re, err_re = _quad(thermal, upper, t, None, epsrel)
        im, err_im = 0.0, 0.0
    else:
        re, err_re = _quad(thermal, upper, t, "cos", epsrel)
        im, err_im = _quad(jw, upper, t, "sin", epsrel)
    value = complex(re, -im)
    abserr = math.hypot(err_re, err_im)
    if density is None:
        abserr += ohmic_tail_bound(spec, upper)
    if abserr > max(QUAD_ACCEPT_REL * abs(value), QUAD_ACCEPT_ABS):
        raise QuadratureError(t, value, abserr)
    return value

def sample_correlation(spec: BathSpec, times: Sequence[float], *,
                       density: Optional[SpectralDensity] = None, epsrel: float = QUAD_EPSREL) -> np.ndarray:
    return np.array([correlation_function(spec, t, density=density, epsrel=epsrel) for t in times])

# ------- closed forms for the ohmic density (used as oracles) -------
def ohmic_correlation_imag(spec: BathSpec, t):
    """Im C(t) = -xi * wc^3 * t / (1 + wc^2 t^2)^2."""
    t = np.asarray(t, dtype=float)
    wc = spec.omega_c
    return -spec.xi * wc ** 3 * t / (1.0 + (wc * t) ** 2) ** 2

def ohmic_correlation_real_at_zero(spec: BathSpec) -> float:
    """Re C(0) = (xi/2) [wc^2 + (2/beta^2) trigamma(1 + 1/(beta wc))]."""
    a = 1.0 / spec.omega_c
    return 0.5 * spec.xi * (1.0 / a ** 2 + 2.0 / spec.beta ** 2 * float(special.polygamma(1, 1.0 + a / spec.beta)))

# --------------------------------------------------------------------------------------
# Exponential fitting
# --------------------------------------------------------------------------------------
def grid_weights(t: np.ndarray) -> np.ndarray:
    """Trapezoid weights, so sum(w * |r|^2) is the squared L2 norm of r over the window."""
    t = np.asarray(t, dtype=float)
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w

def _squared_residual(t: np.ndarray, c: np.ndarray, alphas: np.ndarray, gammas: np.ndarray,
                      weights: np.ndarray) -> float:
    r = c - np.exp(np.multiply.outer(t, gammas)) @ alphas
    return float(np.sum(weights * np.abs(r) ** 2))

def _amplitudes(t: np.ndarray, c: np.ndarray, gammas: np.ndarray, sw: np.ndarray) -> np.ndarray:
    v = np.exp(np.multiply.outer(t, gammas))
    alphas, *_ = np.linalg.lstsq(sw[:, None] * v, sw * c, rcond=None)
    return alphas

def _pencil_basis(c: np.ndarray, pencil: int) -> np.ndarray:
    """Right singular vectors of the Hankel matrix of c (rows of Vh)."""
    n = len(c)
    h = linalg.hankel(c[: n - pencil], c[n - pencil - 1:])
    _, _, vh = linalg.svd(h, full_matrices=False)
    return vh

def matrix_pencil(vh: np.ndarray, dt: float, k: int) -> np.ndarray:
    """ESPRIT rate estimate for k exponentials from a precomputed Hankel basis."""
    w0 = vh[:k, :-1]
    w1 = vh[:k, 1:]
    z = linalg.eigvals(linalg.pinv(w0.T) @ w1.T)
    z = np.where(np.abs(z) < 1e-300, 1e-300, z)
    gammas = np.log(z.astype(complex)) / dt
    return gammas

def _clip_rates(gammas: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    g = np.asarray(gammas, dtype=complex).copy()
    bad = ~np.isfinite(g)
    g[bad] = -1.0
    g.real = np.minimum(g.real, -floor)
    return g

def refine_rates(t: np.ndarray, c: np.ndarray, gammas0: np.ndarray, weights: Optional[np.ndarray] = None,
                 max_nfev: int | None = None) -> np.ndarray:
    """Variable-projection least squares over the rates; amplitudes solved linearly."""
    k = len(gammas0)
    sw = np.sqrt(grid_weights(t) if weights is None else weights)
    g0 = _clip_rates(gammas0)
    x0 = np.concatenate([g0.real, g0.imag])

    def resid(x):
        g = x[:k] + 1j * x[k:]
        v = sw[:, None] * np.exp(np.multiply.outer(t, g))
        a, *_ = np.linalg.lstsq(v, sw * c, rcond=None)
        r = sw * c - v @ a
        return np.concatenate([r.real, r.imag])

    lower = np.full(2 * k, -np.inf)
    upper = np.concatenate([np.zeros(k), np.full(k, np.inf)])
    sol = optimize.least_squares(resid, x0, bounds=(lower, upper), x_scale="jac",
                                 ftol=1e-15, xtol=1e-15, gtol=1e-15,
                                 max_nfev=max_nfev or 300 * (2 * k + 1))
    return sol.x[:k] + 1j * sol.x[k:]

@dataclass
class _Attempt:
    gammas: np.ndarray
    alphas: np.ndarray
    residual: float

def _grown_seeds(previous: np.ndarray) -> list[np.ndarray]:
    """The (k-1)-term optimum plus one candidate rate: slow, fast, or between two neighbours."""
    prev = _clip_rates(previous)
    mags = np.sort(np.abs(prev))
    extra = [-0.1 + 0j, -0.5 + 0j, -2.0 * mags[-1] + 0j]
    extra += [-np.sqrt(lo * hi) + 0j for lo, hi in zip(mags[:-1], mags[1:])]
    extra += [np.conj(g) for g in prev if abs(g.imag) > 1e-3]
    return [np.append(prev, e) for e in extra]

def _best_for_k(t: np.ndarray, c: np.ndarray, weights: np.ndarray, k: int,
                bases: list[tuple[np.ndarray, float]], previous: Optional[np.ndarray],
                rng: np.random.Generator, n_jitter: int) -> _Attempt:
    sw = np.sqrt(weights)

    def attempt(seed_rates: np.ndarray) -> Optional[_Attempt]:
        try:
            g = refine_rates(t, c, seed_rates, weights)
        except (ValueError, np.linalg.LinAlgError, linalg.LinAlgError):
            return None
        g = _clip_rates(g, floor=0.0)
        a = _amplitudes(t, c, g, sw)
        res = _squared_residual(t, c, a, g, weights)
        return _Attempt(g, a, res) if np.isfinite(res) else None

    seeds: list[np.ndarray] = []
    for vh, dt in bases:
        if k <= vh.shape[0]:
            seeds.append(matrix_pencil(vh, dt, k))
    if previous is not None and len(previous) == k - 1:
        seeds.extend(_grown_seeds(previous))
    if not seeds:
        seeds.append(-np.geomspace(0.1, 10.0, k).astype(complex))

    best: Optional[_Attempt] = None
    for s in seeds:
        att = attempt(s)
        if att is not None and (best is None or att.residual < best.residual):
            best = att
    if best is None:
        raise NumericalFailure(f"every seed failed for k={k}")

    # restart from perturbed copies of the best optimum
    for scale in np.geomspace(0.3, 0.03, n_jitter):
        s = best.gammas * (1.0 + scale * rng.standard_normal(k)) + 1j * scale * rng.standard_normal(k)
        att = attempt(s)
        if att is not None and att.residual < best.residual:
            best = att
    return best

def fit_samples(t: np.ndarray, c: np.ndarray, tol: float, max_terms: int, *,
                bath: Optional[BathSpec] = None, seed: int = 0, n_jitter: int = 3) -> CorrelationFit:
    """Smallest-k exponential fit of sampled values c(t) on a uniform grid t.

    The residual is the trapezoid-weighted squared 2-norm, i.e. the squared L2 norm of
    the misfit over [t0, t_end]; it does not grow with the sample count.
    """
    t = np.asarray(t, dtype=float)
    c = np.asarray(c, dtype=complex)
    if len(t) < 8 or len(t) != len(c):
        raise ValueError("need at least 8 matching samples to fit")
    if max_terms < 1:
        raise ValueError("max_terms must be >= 1")
    horizon = float(t[-1] - t[0])

    if not np.any(c):
        return CorrelationFit(np.zeros(1), -np.ones(1), 0.0, horizon, len(t), bath)

    dt = float(t[1] - t[0])
    bases = []
    for stride in (1, 2, 4, 8):
        sub = c[::stride]
        if len(sub) > 4 * max_terms and len(sub) <= 1200:
            bases.append((_pencil_basis(sub, len(sub) // 2), dt * stride))
    if not bases:
        step = max(1, len(c) // 1000)
        sub = c[::step]
        bases.append((_pencil_basis(sub, len(sub) // 2), dt * step))

    rng = np.random.default_rng(seed)
    tt = t - t[0]
    weights = grid_weights(tt)
    best_overall: Optional[CorrelationFit] = None
    previous = None
    for k in range(1, max_terms + 1):
        att = _best_for_k(tt, c, weights, k, bases, previous, rng, n_jitter)
        fit = CorrelationFit(att.alphas, att.gammas, att.residual, horizon, len(t), bath)
        log(f"k={k}: residual={att.residual:.3e}")
        if best_overall is None or fit.residual < best_overall.residual:
            best_overall = fit
        if att.residual <= tol:
            return fit
        previous = att.gammas
    raise FitNotConverged(best_overall, tol, max_terms)

def fit_correlation(spec: BathSpec, horizon: Optional[float] = None, tol: Optional[float] = None,
                    max_terms: Optional[int] = None, *, samples: Optional[int] = None,
                    density: Optional[SpectralDensity] = None, seed: int = 0) -> CorrelationFit:
    horizon = float(horizon if horizon is not None else param("QB_FIT_HORIZON"))
    tol = float(tol if tol is not None else param("QB_FIT_TOL"))
    max_terms = int(max_terms if max_terms is not None else param("QB_FIT_MAX_TERMS"))
    samples = int(samples if samples is not None else param("QB_FIT_SAMPLES"))
    if horizon <= 0 or tol <= 0:
        raise ValueError("horizon and tol must be positive")

    t = np.linspace(0.0, horizon, samples)
    c = sample_correlation(spec, t, density=density)
    c0 = abs(c[0])
    if c0 > 0 and abs(c[-1]) / c0 > tol:
        log(f"warn: |C(horizon)|/|C(0)| = {abs(c[-1]) / c0:.2e} > tol; kernel has not decayed "
            f"by t={horizon:g}, consider a longer horizon")
    fit = fit_samples(t, c, tol, max_terms, bath=spec, seed=seed)
    log(f"accepted {fit.n_terms}-term fit, residual={fit.residual:.3e} (tol={tol:g})")
    return fit

def offgrid_residual(fit: CorrelationFit, spec: BathSpec, n: int = 1000, seed: int = 1,
                     density: Optional[SpectralDensity] = None) -> float:
    """Squared L2 norm of C - fit over the window, estimated from n random times."""
    rng = np.random.default_rng(seed)
    ts = np.sort(rng.uniform(0.0, fit.horizon, n))
    c = sample_correlation(spec, ts, density=density)
    return _squared_residual(ts, c, fit.alphas, fit.gammas, np.full(n, fit.horizon / n))
