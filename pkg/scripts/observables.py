#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Scalar diagnostics on reduced qubit states and the TimeSeries table that carries them.

Per-state columns (suffix _X when several initial states share one table):
  sigma_z              tr[sigma_z rho]
  bloch_x/y/z          Bloch vector
  rho11, re_rho12, im_rho12
  error                preparation error w.r.t. the excited state |1>
  fidelity             excited population rho11
Pairwise columns:
  D_X_Y                trace distance between the reduced states of X and Y

CSV: header row, one row per time, 17 significant digits.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from qubit_ops import SIGMA_Z, QubitOperator, bloch_vector, trace_norm_half

CSV_FLOAT_FORMAT = "%.17g"


# --------- single-state metrics ---------
def sigma_z_expectation(rho: QubitOperator) -> float:
    return float(np.trace(SIGMA_Z @ rho).real)

def trace_distance(rho_a: QubitOperator, rho_b: QubitOperator) -> float:
    return trace_norm_half(np.asarray(rho_a) - np.asarray(rho_b))

def preparation_error(rho: QubitOperator) -> float:
    """sqrt((1 - rho11)^2 + |rho12|^2): distance to |1><1|."""
    return float(np.hypot(1.0 - rho[0, 0].real, abs(rho[0, 1])))

def fidelity_excited(rho: QubitOperator) -> float:
    return float(rho[0, 0].real)


# --------- vectorized over a stack of states (T, 2, 2) ---------
def _trace_distance_stack(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.array([trace_norm_half(m) for m in d])

def bloch_trajectory(rho: np.ndarray) -> np.ndarray:
    """(T, 3) Bloch coordinates."""
    return np.array([bloch_vector(r) for r in rho]).reshape(-1, 3)

def reduced_columns(rho: np.ndarray, suffix: str = "") -> dict[str, np.ndarray]:
    """Per-state observable columns for a (T, 2, 2) stack of reduced states."""
    tag = f"_{suffix}" if suffix else ""
    bloch = bloch_trajectory(rho)
    rho12 = rho[:, 0, 1]
    return {
        f"sigma_z{tag}": np.array([sigma_z_expectation(r) for r in rho]),
        f"bloch_x{tag}": bloch[:, 0],
        f"bloch_y{tag}": bloch[:, 1],
        f"bloch_z{tag}": bloch[:, 2],
        f"rho11{tag}": rho[:, 0, 0].real,
        f"re_rho12{tag}": rho12.real,
        f"im_rho12{tag}": rho12.imag,
        f"error{tag}": np.array([preparation_error(r) for r in rho]),
        f"fidelity{tag}": np.array([fidelity_excited(r) for r in rho]),
    }

def pairwise_columns(stacks: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    names = list(stacks)
    out = {}
    for i, x in enumerate(names):
        for y in names[i + 1:]:
            out[f"D_{x}_{y}"] = _trace_distance_stack(stacks[x], stacks[y])
    return out


# --------- table ---------
@dataclass
class TimeSeries:
    times: np.ndarray
    columns: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1:
            raise ValueError("times must be 1-d")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")
        cols = {}
        for name, values in self.columns.items():
            cols[name] = self._check(name, values)
        self.columns = cols

    def _check(self, name: str, values) -> np.ndarray:
        v = np.asarray(values)
        if v.shape != self.times.shape:
            raise ValueError(f"column {name!r} has {v.shape[0] if v.ndim else 0} rows, times has {self.times.size}")
        return v

    def __len__(self) -> int:
        return self.times.size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def add(self, name: str, values) -> None:
        self.columns[name] = self._check(name, values)

    def update(self, cols: Mapping[str, Sequence[float]]) -> None:
        for k, v in cols.items():
            self.add(k, v)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"t": self.times})
        for name, values in self.columns.items():
            df[name] = values
        return df

    def to_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)

    @classmethod
    def from_states(cls, times, stacks: Mapping[str, np.ndarray]) -> "TimeSeries":
        """Per-kind columns for every stack, plus pairwise D columns when there are several."""
        ts = cls(times)
        single = len(stacks) == 1
        for name, rho in stacks.items():
            ts.update(reduced_columns(rho, "" if single else name))
        ts.update(pairwise_columns(stacks))
        return ts
