"""Shared dense linear-algebra helpers: vectorization, Kronecker products,
spectral radius, and operator norms.

All functions are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

import numpy as np

# Dense eigensolvers get slow and memory-hungry past this side; fall back to
# power iteration (theory transition matrices can reach side (sum P_m)^2 * M).
_DENSE_EIG_LIMIT = 512
_POWER_ITER_TOL = 1e-10
_POWER_ITER_CAP = 10_000


def vec(matrix: np.ndarray) -> np.ndarray:
    """Stack the columns of ``matrix`` into a single vector.

    Ordering is [z_11, ..., z_m1, z_12, ..., z_mn]: first column on top.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ValueError(f"vec expects a matrix, got ndim={m.ndim}")
    return m.reshape(-1, order="F").copy()


def unvec(vector: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec`: rebuild a ``rows x cols`` matrix."""
    v = np.asarray(vector, dtype=float).reshape(-1)
    if v.size != rows * cols:
        raise ValueError(f"cannot reshape length-{v.size} vector to {rows}x{cols}")
    return v.reshape(rows, cols, order="F").copy()


def kron(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Kronecker product with matrix (2-D) output for matrix inputs."""
    return np.kron(np.atleast_2d(np.asarray(x, dtype=float)),
                   np.atleast_2d(np.asarray(y, dtype=float)))


def spectral_radius(matrix: np.ndarray) -> float:
    """Largest eigenvalue modulus of a square matrix.

    Uses a dense eigensolver up to side 512 and a growth-rate power
    iteration beyond that (relative tolerance 1e-10, 10k iteration cap).
    """
    a = np.atleast_2d(np.asarray(matrix, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got shape {a.shape}")
    if a.shape[0] == 0:
        return 0.0
    if a.shape[0] <= _DENSE_EIG_LIMIT:
        return float(np.max(np.abs(np.linalg.eigvals(a))))
    return _power_iteration_radius(a)


def _power_iteration_radius(a: np.ndarray) -> float:
    """Estimate rho(A) from the geometric growth rate of ||A^k v||.

    The lagged ratio converges for complex-conjugate dominant pairs as well,
    where the plain Rayleigh quotient would oscillate.
    """
    n = a.shape[0]
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lag = 8
    log_growth = 0.0
    estimate = np.inf
    for k in range(1, _POWER_ITER_CAP + 1):
        v = a @ v
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return 0.0
        log_growth += np.log(norm)
        v /= norm
        if k % lag == 0:
            new_estimate = np.exp(log_growth / lag)
            log_growth = 0.0
            if np.isfinite(estimate) and abs(new_estimate - estimate) <= _POWER_ITER_TOL * max(estimate, 1e-300):
                return float(new_estimate)
            estimate = new_estimate
    return float(estimate)


def operator_norm(matrix: np.ndarray) -> float:
    """Spectral norm (largest singular value)."""
    return float(np.linalg.norm(np.atleast_2d(np.asarray(matrix, dtype=float)), 2))
