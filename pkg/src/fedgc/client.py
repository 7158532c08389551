"""Per-client models.

Each client runs a steady-gain Kalman filter on its own measurement stream
using only its diagonal system blocks, plus an augmented variant that adds
a learned linear correction ``theta @ y`` to the estimated state. The
correction parameter is trained by gradient descent on the local
one-step-ahead prediction loss combined with feedback from the server.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .linalg import spectral_radius

_RICCATI_TOL = 1e-12
_RICCATI_CAP = 100_000


def _as_vector(x, dim: int, what: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.size != dim:
        raise ValueError(f"{what} must have dimension {dim}, got {v.size}")
    return v


@dataclass
class ClientModel:
    """Kalman filter over one client's diagonal blocks (A_mm, C_mm).

    Holds the running filter state: predicted state, estimated state, and
    the last innovation residual.
    """

    client_id: int
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
        p, o = self.state_dim, self.obs_dim
        if self.A.shape != (p, p):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.C.shape[1] != p:
            raise ValueError(f"C must have {p} columns, got {self.C.shape}")
        if self.K.shape != (p, o):
            raise ValueError(f"K must be {p}x{o}, got {self.K.shape}")
        if self.h_hat is None:
            self.h_hat = np.zeros(p)
        else:
            self.h_hat = _as_vector(self.h_hat, p, "initial state estimate")
        if self.h_pred is None:
            self.h_pred = self.h_hat.copy()
        if self.last_residual is None:
            self.last_residual = np.zeros(o)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    def step(self, y_t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """One predict/residual/update cycle; returns (h_pred, r, h_hat)."""
        y = _as_vector(y_t, self.obs_dim, "measurement")
        self.h_pred = self.A @ self.h_hat
        self.last_residual = y - self.C @ self.h_pred
        self.h_hat = self.h_pred + self.K @ self.last_residual
        return self.h_pred.copy(), self.last_residual.copy(), self.h_hat.copy()


def steady_state_gain(A: np.ndarray, C: np.ndarray, q_proc: float, r_meas: float) -> np.ndarray:
    """Steady-state Kalman gain from the Riccati covariance fixed point.

    Iterates the prediction-covariance recursion to tolerance 1e-12
    (100k iteration cap) and returns K = P C^T (C P C^T + r I)^{-1}.
    """
    a = np.atleast_2d(np.asarray(A, dtype=float))
    c = np.atleast_2d(np.asarray(C, dtype=float))
    if q_proc < 0 or r_meas < 0:
        raise ValueError("noise variances must be nonnegative")
    if q_proc + r_meas <= 0:
        raise ValueError("gain iteration needs q_proc + r_meas > 0")

    p_dim, o_dim = a.shape[0], c.shape[0]
    q_cov = q_proc * np.eye(p_dim)
    r_cov = r_meas * np.eye(o_dim)

    p_pred = q_cov.copy()
    gain = np.zeros((p_dim, o_dim))
    for _ in range(_RICCATI_CAP):
        innovation_cov = c @ p_pred @ c.T + r_cov
        try:
            gain = np.linalg.solve(innovation_cov.T, (p_pred @ c.T).T).T
        except np.linalg.LinAlgError as exc:
            raise ValueError("gain iteration failed: singular innovation covariance") from exc
        p_next = a @ (p_pred - gain @ c @ p_pred) @ a.T + q_cov
        if np.max(np.abs(p_next - p_pred)) < _RICCATI_TOL:
            p_pred = p_next
            break
        p_pred = p_next
    else:
        raise ValueError("gain iteration failed: no fixed point within iteration cap")

    closed_loop = spectral_radius(a - a @ gain @ c)
    if closed_loop >= 1.0:
        warnings.warn(f"steady-state filter is unstable: rho = {closed_loop:.6g}")
    return gain


def filter_stability(model: ClientModel) -> dict:
    """Spectral radius of the closed-loop filter matrix A - A K C."""
    rho = spectral_radius(model.A - model.A @ model.K @ model.C)
    return {"rho": rho, "stable": rho < 1.0}


@dataclass
class AugmentedClientModel:
    """Client model plus the additive linear correction ``theta @ y``.

    The augmented estimate is always the client estimate plus the
    correction; the augmented prediction ``A @ h_hat_a`` later serves as the
    server's training label.
    """

    base: ClientModel
    theta: np.ndarray = field(default=None)  # type: ignore[assignment]
    eta1: float = 0.0
    eta2: float = 0.0
    h_hat_a: np.ndarray = field(default=None)  # type: ignore[assignment]
    h_pred_a: np.ndarray = field(default=None)  # type: ignore[assignment]
    last_residual_a: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        p, o = self.base.state_dim, self.base.obs_dim
        if self.theta is None:
            # Zero start: no cross-client effect assumed until learned.
            self.theta = np.zeros((p, o))
        else:
            self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
            if self.theta.shape != (p, o):
                raise ValueError(f"theta must be {p}x{o}, got {self.theta.shape}")
        if self.eta1 < 0 or self.eta2 < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.h_hat_a is None:
            self.h_hat_a = self.base.h_hat.copy()
        else:
            self.h_hat_a = _as_vector(self.h_hat_a, p, "augmented state estimate")
        if self.h_pred_a is None:
            self.h_pred_a = self.h_hat_a.copy()
        if self.last_residual_a is None:
            self.last_residual_a = np.zeros(o)

    def predict(self) -> np.ndarray:
        """Augmented prediction A_mm @ h_hat_a from the stored estimate."""
        self.h_pred_a = self.base.A @ self.h_hat_a
        return self.h_pred_a.copy()

    def estimate(self, h_hat_c: np.ndarray, y_t: np.ndarray) -> np.ndarray:
        """Augmented estimate h_hat_c + theta @ y_t; stored on the model."""
        h_c = _as_vector(h_hat_c, self.base.state_dim, "client estimate")
        y = _as_vector(y_t, self.base.obs_dim, "measurement")
        self.h_hat_a = h_c + self.theta @ y
        return self.h_hat_a.copy()

    def loss(self, y_t: np.ndarray) -> float:
        """Squared prediction residual ||y_t - C @ h_pred_a||^2."""
        y = _as_vector(y_t, self.base.obs_dim, "measurement")
        self.last_residual_a = y - self.base.C @ self.h_pred_a
        return float(self.last_residual_a @ self.last_residual_a)

    def grad_theta(self, y_t: np.ndarray, y_prev: np.ndarray,
                   h_hat_c_prev: np.ndarray) -> np.ndarray:
        """Analytic gradient of the local loss with respect to theta.

        -2 (C A)^T (y_t - C A [h_hat_c_prev + theta y_prev]) y_prev^T
        """
        y = _as_vector(y_t, self.base.obs_dim, "measurement")
        yp = _as_vector(y_prev, self.base.obs_dim, "previous measurement")
        hp = _as_vector(h_hat_c_prev, self.base.state_dim, "previous client estimate")
        ca = self.base.C @ self.base.A
        residual = y - ca @ (hp + self.theta @ yp)
        return -2.0 * np.outer(ca.T @ residual, yp)

    def update_theta(self, grad_client: np.ndarray, server_grad: np.ndarray,
                     y_prev: np.ndarray) -> np.ndarray:
        """Combined descent step on the local loss and the server feedback.

        theta <- theta - eta1 * grad_client - eta2 * (server_grad y_prev^T)
        """
        p, o = self.base.state_dim, self.base.obs_dim
        g_local = np.atleast_2d(np.asarray(grad_client, dtype=float))
        if g_local.shape != (p, o):
            raise ValueError(f"client gradient must be {p}x{o}, got {g_local.shape}")
        g_server = _as_vector(server_grad, p, "server state gradient")
        yp = _as_vector(y_prev, o, "previous measurement")
        self.theta = self.theta - self.eta1 * g_local - self.eta2 * np.outer(g_server, yp)
        return self.theta.copy()


@dataclass(frozen=True)
class FilterTrajectory:
    """Stored filter pass: rows are time steps 0..T.

    Row 0 of ``predicted``/``estimated`` repeats the initial estimate and
    ``residuals[0]`` is zero; actual filtering starts at t = 1.
    """

    predicted: np.ndarray
    estimated: np.ndarray
    residuals: np.ndarray

    @property
    def T(self) -> int:
        return self.estimated.shape[0] - 1


def run_client_filter(model: ClientModel, measurements: np.ndarray) -> FilterTrajectory:
    """Run the client filter over a (T+1) x obs_dim measurement stream.

    Row 0 of the stream is the time-0 measurement, which the filter does not
    consume; steps run for t = 1..T. The model's state advances.
    """
    y = np.atleast_2d(np.asarray(measurements, dtype=float))
    if y.shape[1] != model.obs_dim:
        raise ValueError(f"measurement stream must have {model.obs_dim} columns")
    steps = y.shape[0] - 1
    predicted = np.empty((steps + 1, model.state_dim))
    estimated = np.empty((steps + 1, model.state_dim))
    residuals = np.zeros((steps + 1, model.obs_dim))
    predicted[0] = model.h_pred
    estimated[0] = model.h_hat
    for t in range(1, steps + 1):
        predicted[t], residuals[t], estimated[t] = model.step(y[t])
    return FilterTrajectory(predicted=predicted, estimated=estimated, residuals=residuals)
