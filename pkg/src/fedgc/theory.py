"""Unified recurrence analysis for a focal client.

One joint descent step of the server's cross blocks and a client's
correction parameter, at a frozen time index, is an affine map
``delta' = H delta + J`` over the stacked vector
``[vec(A_hat_m1), ..., vec(A_hat_mM) (n != m), vec(theta_m)]``. This module
assembles H and J from the frozen data, iterates and solves the recurrence,
and evaluates convergence/rate conditions and stationarity residuals.

Convention note: the descent step weights the local-loss curvature
(A^T C^T C A) with eta1 and the server-feedback curvature (A^T A) with
eta2; the assembled H follows that assignment so one federated update
reproduces H delta + J exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import kron, operator_norm, spectral_radius, unvec, vec
from .ssm import BlockSpec

_NEAR_SINGULAR_COND = 1e12


@dataclass(frozen=True)
class RecurrenceSystem:
    """Affine one-step map for the joint parameter vector of client m.

    ``others`` lists the non-focal client indices in ascending order; the
    stacked vector holds vec(A_hat[m, n]) for each, then vec(theta_m).
    """

    m: int
    t: int
    spec: BlockSpec
    others: tuple[int, ...]
    H: np.ndarray
    J: np.ndarray
    blocks: dict

    @property
    def size(self) -> int:
        return self.J.size

    @property
    def block_sizes(self) -> tuple[int, ...]:
        p = self.spec.dims[self.m]
        sizes = [p * self.spec.dims[n] for n in self.others]
        sizes.append(p * self.spec.obs_dims[self.m])
        return tuple(sizes)

    @property
    def block_slices(self) -> tuple[slice, ...]:
        offsets = np.cumsum((0,) + self.block_sizes)
        return tuple(slice(int(offsets[i]), int(offsets[i + 1]))
                     for i in range(len(self.block_sizes)))

    @property
    def theta_slice(self) -> slice:
        return self.block_slices[-1]

    def stack(self, A_hat: dict, theta: np.ndarray) -> np.ndarray:
        """Stack the focal client's blocks and theta into a delta vector."""
        parts = [vec(A_hat[(self.m, n)]) for n in self.others]
        parts.append(vec(theta))
        return np.concatenate(parts)

    def split(self, delta: np.ndarray) -> tuple[dict, np.ndarray]:
        """Inverse of :meth:`stack`."""
        d = np.asarray(delta, dtype=float).reshape(-1)
        if d.size != self.size:
            raise ValueError(f"delta must have length {self.size}, got {d.size}")
        p = self.spec.dims[self.m]
        blocks = {}
        for n, sl in zip(self.others, self.block_slices):
            blocks[(self.m, n)] = unvec(d[sl], p, self.spec.dims[n])
        theta = unvec(d[self.theta_slice], p, self.spec.obs_dims[self.m])
        return blocks, theta


def build_recurrence(spec: BlockSpec, m: int, A_mm: np.ndarray, C_mm: np.ndarray,
                     h_hat_c_prev_all: list, y_prev: np.ndarray, y_t: np.ndarray,
                     eta1: float, eta2: float, gamma: float,
                     t: int = 0) -> RecurrenceSystem:
    """Assemble H and J from the data frozen at one time index.

    Inputs are the previous-step client estimates of every client, the
    focal client's previous and current measurements, and the three
    learning rates.
    """
    a = np.atleast_2d(np.asarray(A_mm, dtype=float))
    c = np.atleast_2d(np.asarray(C_mm, dtype=float))
    p = spec.dims[m]
    o = spec.obs_dims[m]
    if a.shape != (p, p) or c.shape != (o, p):
        raise ValueError("A_mm/C_mm do not match the focal client's dimensions")
    if len(h_hat_c_prev_all) != spec.n_clients:
        raise ValueError("need one previous client estimate per client")
    u = [np.asarray(h, dtype=float).reshape(-1) for h in h_hat_c_prev_all]
    for n, vec_n in enumerate(u):
        if vec_n.size != spec.dims[n]:
            raise ValueError(f"client {n} estimate must have dimension {spec.dims[n]}")
    yp = np.asarray(y_prev, dtype=float).reshape(-1)
    yt = np.asarray(y_t, dtype=float).reshape(-1)
    if yp.size != o or yt.size != o:
        raise ValueError(f"focal measurements must have dimension {o}")

    others = tuple(n for n in range(spec.n_clients) if n != m)
    sizes = [p * spec.dims[n] for n in others] + [p * o]
    offsets = np.cumsum([0] + sizes)
    side = int(offsets[-1])

    big_r = 2.0 * a
    big_g = np.outer(yp, yp)
    big_f = 2.0 * eta1 * (a.T @ c.T @ c @ a) + 2.0 * eta2 * (a.T @ a)
    q_blocks = {n: np.outer(yp, u[n]) for n in others}
    residual_c = yt - c @ a @ u[m]
    big_d = a.T @ c.T @ np.outer(residual_c, yp)

    H = np.zeros((side, side))
    J = np.zeros(side)
    eye_p = np.eye(p)
    diag_cache = {}

    for i, n in enumerate(others):
        row = slice(int(offsets[i]), int(offsets[i + 1]))
        for j, q in enumerate(others):
            col = slice(int(offsets[j]), int(offsets[j + 1]))
            coupling = -2.0 * gamma * kron(np.outer(u[n], u[q]), eye_p)
            if q == n:
                coupling += np.eye(p * spec.dims[n])
                diag_cache[n] = coupling
            H[row, col] = coupling
        H[row, offsets[-2]:] = gamma * kron(q_blocks[n].T, big_r)

    theta_row = slice(int(offsets[-2]), side)
    for j, q in enumerate(others):
        col = slice(int(offsets[j]), int(offsets[j + 1]))
        H[theta_row, col] = eta2 * kron(q_blocks[q], big_r.T)
    H[theta_row, theta_row] = np.eye(p * o) - kron(big_g, big_f)
    J[theta_row] = 2.0 * eta1 * vec(big_d)

    blocks = {"P": diag_cache, "Q": q_blocks, "R": big_r, "G": big_g,
              "F": big_f, "D": big_d}
    return RecurrenceSystem(m=m, t=t, spec=spec, others=others, H=H, J=J, blocks=blocks)


def recurrence_step(rs: RecurrenceSystem, delta: np.ndarray) -> np.ndarray:
    """Apply the affine map once: H delta + J."""
    d = np.asarray(delta, dtype=float).reshape(-1)
    if d.size != rs.size:
        raise ValueError(f"delta must have length {rs.size}, got {d.size}")
    return rs.H @ d + rs.J


def convergence_verdict(rs: RecurrenceSystem) -> dict:
    """Spectral-radius test plus the stationary point where it exists."""
    rho = spectral_radius(rs.H)
    verdict = {"rho": rho, "convergent": rho < 1.0, "delta_star": None,
               "condition": None, "near_singular": False}
    if not verdict["convergent"]:
        return verdict
    lhs = np.eye(rs.size) - rs.H
    cond = float(np.linalg.cond(lhs))
    verdict["condition"] = cond
    if cond > _NEAR_SINGULAR_COND:
        verdict["near_singular"] = True
        return verdict
    verdict["delta_star"] = np.linalg.solve(lhs, rs.J)
    return verdict


def gd_form_residual(rs: RecurrenceSystem, delta: np.ndarray) -> float:
    """Residual of the descent rewrite of the recurrence.

    ||(H delta + J) - (delta - (I - H)(delta - delta_star))||_inf must sit
    at rounding level whenever delta_star exists; this makes the algebraic
    identity a testable quantity.
    """
    verdict = convergence_verdict(rs)
    if verdict["delta_star"] is None:
        raise ValueError("stationary point unavailable; cannot form the descent rewrite")
    d = np.asarray(delta, dtype=float).reshape(-1)
    lhs = recurrence_step(rs, d)
    rhs = d - (np.eye(rs.size) - rs.H) @ (d - verdict["delta_star"])
    return float(np.max(np.abs(lhs - rhs)))


def rate_check(rs: RecurrenceSystem, lipschitz: float, mu: float | None = None) -> dict:
    """Step-size conditions for sublinear / linear convergence rates.

    Evaluates the spectral norm of I - H against 1 (sublinear) and
    2L/(mu + L) (linear). The constants are caller-supplied hypotheses.
    """
    if lipschitz <= 0:
        raise ValueError("lipschitz constant must be positive")
    if mu is not None and (mu <= 0 or mu > lipschitz):
        raise ValueError("mu must satisfy 0 < mu <= lipschitz")
    norm = operator_norm(np.eye(rs.size) - rs.H)
    result = {"norm": norm, "sublinear_ok": norm <= 1.0, "linear_ok": None}
    if mu is not None:
        result["linear_ok"] = norm <= 2.0 * lipschitz / (mu + lipschitz)
    return result


def optimality_residuals(spec: BlockSpec, A_diag: list, C_diag: list,
                         theta_star: list, A_hat_star: dict,
                         measurements: list, h_hat_c: list, window: int) -> dict:
    """Sample-mean stationarity residuals at converged parameters.

    cond1[m]: norm of the mean augmented prediction residual of client m.
    cond2[(m, n)]: Frobenius norm of the mean zero-gradient matrix of the
    server block (m, n).
    Averages run over the trailing ``window`` transitions.
    """
    T = np.atleast_2d(np.asarray(measurements[0], dtype=float)).shape[0] - 1
    if window < 1 or window > T:
        raise ValueError(f"window must be in [1, {T}]")
    t_range = range(T - window + 1, T + 1)

    y = [np.atleast_2d(np.asarray(s, dtype=float)) for s in measurements]
    h = [np.atleast_2d(np.asarray(s, dtype=float)) for s in h_hat_c]

    cond1 = []
    for m in range(spec.n_clients):
        ca = np.atleast_2d(C_diag[m]) @ np.atleast_2d(A_diag[m])
        acc = np.zeros(spec.obs_dims[m])
        for t in t_range:
            acc += y[m][t] - ca @ (h[m][t - 1] + theta_star[m] @ y[m][t - 1])
        cond1.append(float(np.linalg.norm(acc / window)))

    cond2 = {}
    for m in range(spec.n_clients):
        a_mm = np.atleast_2d(A_diag[m])
        others = [n for n in range(spec.n_clients) if n != m]
        for n in others:
            acc = np.zeros((spec.dims[m], spec.dims[n]))
            for t in t_range:
                correction = a_mm @ (theta_star[m] @ y[m][t - 1])
                for p in others:
                    correction = correction - A_hat_star[(m, p)] @ h[p][t - 1]
                acc += np.outer(correction, h[n][t - 1])
            cond2[(m, n)] = float(np.linalg.norm(acc / window))

    return {"cond1": cond1, "cond2": cond2}
