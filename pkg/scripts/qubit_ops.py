#!/usr/bin/env python3
# qubit_ops.py
"""
2x2 operator algebra for the driven qubit.

Basis: index 0 <-> |1> (excited, north pole), index 1 <-> |0> (ground, south pole),
so sigma_z |1> = +|1> and rho[0, 0] is the excited population rho11.
Energies in units of Omega, times in 1/Omega, hbar = 1.
"""
from __future__ import annotations
from typing import Tuple
import numpy as np

QubitOperator = np.ndarray   # shape (2, 2), complex128

HERMITIAN_TOL = 1e-10
TRACE_TOL     = 1e-10
POSITIVITY_TOL = 1e-8

# ------- constants -------
IDENTITY = np.eye(2, dtype=complex)
SIGMA_X  = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y  = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z  = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_PLUS  = np.array([[0, 1], [0, 0]], dtype=complex)   # |1><0|
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)   # |0><1|

EXCITED = np.array([[1, 0], [0, 0]], dtype=complex)
GROUND  = np.array([[0, 0], [0, 1]], dtype=complex)
MIXED   = 0.5 * IDENTITY

_PAULI = {"x": SIGMA_X, "y": SIGMA_Y, "z": SIGMA_Z}

# ------- constructors -------
def pauli(axis: str) -> QubitOperator:
    try:
        return _PAULI[axis.lower()].copy()
    except (KeyError, AttributeError):
        raise ValueError(f"pauli axis must be one of x, y, z; got {axis!r}") from None

def density_from_bloch(x: float, y: float, z: float) -> QubitOperator:
    return 0.5 * (IDENTITY + x * SIGMA_X + y * SIGMA_Y + z * SIGMA_Z)

def gibbs_state(hamiltonian: QubitOperator, beta: float) -> QubitOperator:
    """exp(-beta H) / tr exp(-beta H), via eigh so large beta does not overflow."""
    w, v = np.linalg.eigh(hamiltonian)
    p = np.exp(-beta * (w - w.min()))
    p /= p.sum()
    return (v * p) @ v.conj().T

# ------- algebra -------
def dagger(a: QubitOperator) -> QubitOperator:
    return np.conj(np.swapaxes(a, -1, -2))

def commutator(a: QubitOperator, b: QubitOperator) -> QubitOperator:
    return a @ b - b @ a

def liouville_apply(h: QubitOperator, a: QubitOperator) -> QubitOperator:
    """-i[H, A]; broadcasts over a leading stack axis of A."""
    return -1j * (h @ a - a @ h)

def trace(a: QubitOperator) -> complex:
    return complex(a[0, 0] + a[1, 1])

# ------- norms -------
def trace_norm_half(a: QubitOperator) -> float:
    """(1/2) * sum of singular values; closed form when A is hermitian and traceless."""
    a = np.asarray(a, dtype=complex)
    if is_hermitian(a) and abs(trace(a)) <= TRACE_TOL:
        return _half_norm_traceless_hermitian(a)
    return _half_norm_svd(a)

def _half_norm_traceless_hermitian(a: QubitOperator) -> float:
    return float(np.sqrt(a[0, 0].real ** 2 + abs(a[0, 1]) ** 2))

def _half_norm_svd(a: QubitOperator) -> float:
    return 0.5 * float(np.linalg.svd(a, compute_uv=False).sum())

# ------- checks -------
def is_hermitian(a: QubitOperator, tol: float = HERMITIAN_TOL) -> bool:
    return bool(np.max(np.abs(a - dagger(a))) <= tol)

def is_density_matrix(rho: QubitOperator, tol: float = TRACE_TOL) -> bool:
    if rho.shape != (2, 2) or not is_hermitian(rho, tol):
        return False
    if abs(trace(rho) - 1.0) > tol:
        return False
    return bool(np.linalg.eigvalsh(0.5 * (rho + dagger(rho))).min() >= -POSITIVITY_TOL)

def require_density_matrix(rho: QubitOperator, name: str = "rho") -> None:
    if not is_density_matrix(np.asarray(rho)):
        raise ValueError(f"{name} is not a density matrix (hermitian, unit trace, positive)")

# ------- coordinates -------
def bloch_vector(rho: QubitOperator) -> Tuple[float, float, float]:
    x = 2.0 * rho[0, 1].real          # tr[sigma_x rho]
    y = -2.0 * rho[0, 1].imag         # tr[sigma_y rho]
    z = (rho[0, 0] - rho[1, 1]).real  # tr[sigma_z rho]
    return float(x), float(y), float(z)
