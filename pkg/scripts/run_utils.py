#!/usr/bin/env python3
"""
Shared plumbing for the qubit-bath toolkit: repo paths, central defaults,
tagged logging, run metadata and the exception hierarchy.

Defaults (override any of them with an env var of the same name):
  QB_RTOL / QB_ATOL          integrator tolerances
  QB_MAX_STEP                hard cap on the integrator step (1/Ω)
  QB_FIT_TOL                 squared 2-norm acceptance for the kernel fit
  QB_FIT_MAX_TERMS           largest exponential count tried
  QB_FIT_HORIZON             fit window [0, horizon] in 1/Ω
  QB_FIT_SAMPLES             uniform samples on the fit window
  QB_EQ_TOL / QB_EQ_TMAX     equilibration stop criterion and time limit
  QB_WITNESS_TOL             threshold on D/F/I for witness flags
  QB_SANDWICH_TOL            slack on |I - F| <= D <= I + F
"""

from __future__ import annotations
import json
import os
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterator

# --------------------------------------------------------------------------------------
# Repo paths
# --------------------------------------------------------------------------------------
REPO_ROOT = Path(__file__).resolve().parents[1]
SCRIPTS   = REPO_ROOT / "scripts"
STATE_DIR = REPO_ROOT / "state"
RESULTS   = REPO_ROOT / "results"
CONFIGS   = REPO_ROOT / "configs"

# --------------------------------------------------------------------------------------
# Env knobs
# --------------------------------------------------------------------------------------
def env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw in (None, ""):
        return float(default)
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"env {name}: expected a number, got {raw!r}") from None

def env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw in (None, ""):
        return int(default)
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"env {name}: expected an integer, got {raw!r}") from None

# --------------------------------------------------------------------------------------
# Central defaults (energies in Ω, times in 1/Ω)
# --------------------------------------------------------------------------------------
DEFAULTS = {
    # integrator
    "QB_RTOL": 1e-9,
    "QB_ATOL": 1e-12,
    "QB_MAX_STEP": 0.5,
    "QB_STEPS_PER_PERIOD": 50,       # max_step = period / 50 inside drive windows

    # kernel fit
    "QB_FIT_TOL": 1e-7,
    "QB_FIT_MAX_TERMS": 6,
    "QB_FIT_HORIZON": 100.0,        # |C(t)| ~ xi / (omega_c beta t^2) at long times
    "QB_FIT_SAMPLES": 4000,

    # equilibration
    "QB_EQ_TOL": 1e-10,
    "QB_EQ_TMAX": 800.0,
    "QB_EQ_CHUNK": 20.0,

    # bounds / witnesses
    "QB_WITNESS_TOL": 1e-6,
    "QB_SANDWICH_TOL": 1e-9,

    # output grids
    "QB_OUTPUT_SAMPLES": 2000,
    "QB_SAMPLES_PER_PERIOD": 40,
}

def param(name: str) -> float:
    """Active value of a default, env var first."""
    default = DEFAULTS[name]
    if isinstance(default, int) and not isinstance(default, bool):
        return env_int(name, default)
    return env_float(name, default)

def active_params() -> dict:
    return {k: param(k) for k in DEFAULTS}

# --------------------------------------------------------------------------------------
# Exceptions
# --------------------------------------------------------------------------------------
class SimulationError(RuntimeError):
    pass

class ConfigError(SimulationError, ValueError):
    pass

class NumericalFailure(SimulationError):
    pass

# --------------------------------------------------------------------------------------
# Logging
# --------------------------------------------------------------------------------------
def make_log(tag: str) -> Callable[[str], None]:
    def log(msg: str) -> None:
        ts = datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC")
        print(f"[{tag}] {ts} {msg}", flush=True)
    return log

@contextmanager
def timed(log: Callable[[str], None], label: str) -> Iterator[None]:
    log(f"→ {label}")
    t0 = time.time()
    yield
    log(f"✓ {label} done in {time.time() - t0:.1f}s")

def dump_params(log: Callable[[str], None], extra: dict | None = None) -> dict:
    params = active_params()
    if extra:
        params.update(extra)
    log("=== ACTIVE PARAMETERS ===")
    for k, v in params.items():
        log(f"{k} = {v}")
    return params

# --------------------------------------------------------------------------------------
# JSON artifacts
# --------------------------------------------------------------------------------------
def write_json(path: Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2), encoding="utf-8")

def read_json(path: Path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None

def write_meta(path: Path, mode: str, status: str = "ok", extra: dict | None = None) -> None:
    meta = {
        "mode": mode,
        "status": status,
        "time_utc": datetime.now(timezone.utc).isoformat(),
        "git_sha": os.getenv("GITHUB_SHA", ""),
        "runner": os.getenv("GITHUB_RUN_ID", ""),
    }
    if extra:
        meta.update(extra)
    write_json(path, meta)
