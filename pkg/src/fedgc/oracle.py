"""Centralized Kalman-filter benchmark.

The oracle filters the full measurement vector with the complete state
matrix (off-diagonal blocks included) and serves as the reference the
federated models are compared against: state-gap statistics and the
empirical two-sided estimation-error bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .client import FilterTrajectory
from .linalg import operator_norm, spectral_radius
from .ssm import BlockSpec


@dataclass
class CentralizedOracle:
    """Kalman filter over the joint system with the full state matrix."""

    spec: BlockSpec
    A: np.ndarray
    C: np.ndarray
    K: np.ndarray
    h_hat: np.ndarray = field(default=None)  # type: ignore[assignment]
    h_pred: np.ndarray = field(default=None)  # type: ignore[assignment]
    last_residual: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        n, p = self.spec.state_dim, self.spec.obs_dim
        if self.A.shape != (n, n):
            raise ValueError(f"A must be {n}x{n}, got {self.A.shape}")
        if self.C.shape != (p, n):
            raise ValueError(f"C must be {p}x{n}, got {self.C.shape}")
        if self.K.shape != (n, p):
            raise ValueError(f"K must be {n}x{p}, got {self.K.shape}")
        if self.h_hat is None:
            self.h_hat = np.zeros(n)
        else:
            self.h_hat = np.asarray(self.h_hat, dtype=float).reshape(-1)
            if self.h_hat.size != n:
                raise ValueError(f"initial estimate must have dimension {n}")
        if self.h_pred is None:
            self.h_pred = self.h_hat.copy()
        if self.last_residual is None:
            self.last_residual = np.zeros(p)

    def is_convergent(self) -> bool:
        """True when the closed-loop matrix A - A K C is stable."""
        return spectral_radius(self.A - self.A @ self.K @ self.C) < 1.0

    def step(self, y_t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """One predict/residual/update cycle on the full measurement."""
        y = np.asarray(y_t, dtype=float).reshape(-1)
        if y.size != self.spec.obs_dim:
            raise ValueError(f"measurement must have dimension {self.spec.obs_dim}")
        self.h_pred = self.A @ self.h_hat
        self.last_residual = y - self.C @ self.h_pred
        self.h_hat = self.h_pred + self.K @ self.last_residual
        return self.h_pred.copy(), self.last_residual.copy(), self.h_hat.copy()


def run_oracle_filter(oracle: CentralizedOracle, measurements: np.ndarray) -> FilterTrajectory:
    """Filter a (T+1) x obs_dim stream; row 0 is initial state, steps at t >= 1."""
    y = np.atleast_2d(np.asarray(measurements, dtype=float))
    if y.shape[1] != oracle.spec.obs_dim:
        raise ValueError(f"measurement stream must have {oracle.spec.obs_dim} columns")
    steps = y.shape[0] - 1
    predicted = np.empty((steps + 1, oracle.spec.state_dim))
    estimated = np.empty((steps + 1, oracle.spec.state_dim))
    residuals = np.zeros((steps + 1, oracle.spec.obs_dim))
    predicted[0] = oracle.h_pred
    estimated[0] = oracle.h_hat
    for t in range(1, steps + 1):
        predicted[t], residuals[t], estimated[t] = oracle.step(y[t])
    return FilterTrajectory(predicted=predicted, estimated=estimated, residuals=residuals)


def _trailing(window: int, length: int) -> slice:
    if window < 1:
        raise ValueError("window must be >= 1")
    if window > length:
        raise ValueError(f"window {window} longer than trajectory of {length} steps")
    return slice(length - window, length)


def oracle_gap(oracle_traj: FilterTrajectory, spec: BlockSpec,
               aug_predicted_all: list, client_estimated_all: list,
               window: int) -> dict:
    """Trailing-window comparison between augmented clients and the oracle.

    Per client: the sample mean of the predicted-state difference
    (h_a - h_o), its norm relative to the mean oracle prediction norm, and
    the empirical maximum estimated-state gap ||h_hat_o - h_hat_c|| used as
    the delta_max estimate.
    """
    rows = oracle_traj.estimated.shape[0]
    win = _trailing(window, rows)
    report = {"state_gap_means": [], "state_gap_norms": [],
              "oracle_pred_mean_norms": [], "delta_max": []}
    for m in range(spec.n_clients):
        sl = spec.state_slice(m)
        h_o_pred = oracle_traj.predicted[win, sl]
        h_a_pred = np.atleast_2d(np.asarray(aug_predicted_all[m], dtype=float))[win]
        h_o_est = oracle_traj.estimated[win, sl]
        h_c_est = np.atleast_2d(np.asarray(client_estimated_all[m], dtype=float))[win]
        if h_a_pred.shape != h_o_pred.shape or h_c_est.shape != h_o_est.shape:
            raise ValueError(f"client {m} trajectories are not aligned with the oracle")
        gap_mean = np.mean(h_a_pred - h_o_pred, axis=0)
        report["state_gap_means"].append(gap_mean)
        report["state_gap_norms"].append(float(np.linalg.norm(gap_mean)))
        report["oracle_pred_mean_norms"].append(
            float(np.mean(np.linalg.norm(h_o_pred, axis=1))))
        report["delta_max"].append(
            float(np.max(np.linalg.norm(h_o_est - h_c_est, axis=1))))
    return report


def granger_error_bound(A_hat_star: dict, A_true: np.ndarray, spec: BlockSpec,
                        delta_max_all: list, oracle_traj: FilterTrajectory,
                        window: int) -> dict:
    """Empirical check of the estimation-error bound on the learned blocks.

    lhs_m averages ||sum_n (A_hat_mn - A_mn) h_hat_o_n|| over the trailing
    window; rhs_m bounds it by operator norms scaled with the delta_max
    estimates. The collinearity-based corollary is evaluated with
    sigma_min = min_n mean ||h_hat_o_n|| and reported as not applicable
    when that mean vanishes or block shapes cannot be summed.
    """
    a = np.atleast_2d(np.asarray(A_true, dtype=float))
    if a.shape != (spec.state_dim, spec.state_dim):
        raise ValueError("A_true must match the block spec")
    rows = oracle_traj.estimated.shape[0]
    win = _trailing(window, rows)

    per_client = []
    for m in range(spec.n_clients):
        others = [n for n in range(spec.n_clients) if n != m]
        errors = {n: np.atleast_2d(np.asarray(A_hat_star[(m, n)], dtype=float))
                  - a[spec.state_slice(m), spec.state_slice(n)] for n in others}

        summed = np.zeros((len(range(win.start, win.stop)), spec.dims[m]))
        for n in others:
            summed += oracle_traj.estimated[win, spec.state_slice(n)] @ errors[n].T
        lhs = float(np.mean(np.linalg.norm(summed, axis=1)))

        a_mm = a[spec.state_slice(m), spec.state_slice(m)]
        rhs = operator_norm(a_mm) * delta_max_all[m]
        for n in others:
            rhs += operator_norm(A_hat_star[(m, n)]) * delta_max_all[n]

        mean_norms = {n: float(np.mean(np.linalg.norm(
            oracle_traj.estimated[win, spec.state_slice(n)], axis=1))) for n in others}
        sigma_min = min(mean_norms.values()) if mean_norms else 0.0

        shapes = {errors[n].shape for n in others}
        if sigma_min <= 0.0 or len(shapes) != 1:
            corollary = {"applicable": False, "lhs": None, "rhs": None,
                         "sigma_min": sigma_min if sigma_min > 0 else None}
        else:
            block_sum = sum(errors[n] for n in others)
            corollary = {"applicable": True,
                         "lhs": float(np.linalg.norm(block_sum)),
                         "rhs": rhs / sigma_min,
                         "sigma_min": sigma_min}

        per_client.append({"client": m, "lhs": lhs, "rhs": rhs,
                           "holds": lhs <= rhs, "corollary": corollary})

    return {"per_client": per_client,
            "holds": all(entry["holds"] for entry in per_client)}
