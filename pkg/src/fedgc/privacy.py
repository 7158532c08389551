"""Differential-privacy mechanisms for both communication directions.

Clients perturb the two estimated states they transmit with Gaussian noise
calibrated to the measurement sensitivity; the server clips its state
gradient to a Frobenius threshold and adds Gaussian noise. Calibration
sets each noise scale to the exact lower bound of the Gaussian mechanism
for the requested per-message (epsilon, delta) budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

#: direction codes for reproducible noise substreams
C2S, S2C = 0, 1


@dataclass(frozen=True)
class PrivacyParams:
    """Per-message budgets, sensitivity bounds, and derived noise scales.

    ``sigma_*`` stay ``None`` until :func:`calibrate` fills them with the
    minimal valid values. ``B_y``/``B_K``/``B_theta`` bound the measurement,
    Kalman-gain, and correction-parameter norms; ``C_g`` is the gradient
    clipping threshold.
    """

    eps_c: float
    delta_c: float
    eps_a: float
    delta_a: float
    eps_g: float
    delta_g: float
    B_y: float
    B_K: float
    B_theta: float
    C_g: float
    sigma_c: float | None = None
    sigma_a: float | None = None
    sigma_g: float | None = None

    def __post_init__(self) -> None:
        for name in ("eps_c", "eps_a", "eps_g"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("delta_c", "delta_a", "delta_g"):
            value = getattr(self, name)
            if value <= 0 or value >= 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        for name in ("B_y", "B_K", "C_g"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.B_theta < 0:
            raise ValueError("B_theta must be nonnegative")

    @property
    def calibrated(self) -> bool:
        return None not in (self.sigma_c, self.sigma_a, self.sigma_g)

    @property
    def client_budget(self) -> tuple[float, float]:
        """Sequential composition of the two client-side mechanisms."""
        return (self.eps_c + self.eps_a, self.delta_c + self.delta_a)


def gaussian_sigma(sensitivity: float, eps: float, delta: float) -> float:
    """Minimal Gaussian-mechanism noise scale for an l2-sensitivity."""
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / eps


def calibrate(params: PrivacyParams) -> PrivacyParams:
    """Fill in the minimal valid noise scales for every mechanism.

    sigma_c covers the client estimate (sensitivity 2 B_y B_K), sigma_a the
    augmented estimate (2 B_y (B_K + B_theta)), sigma_g the clipped server
    gradient (2 C_g).
    """
    return replace(
        params,
        sigma_c=gaussian_sigma(2.0 * params.B_y * params.B_K, params.eps_c, params.delta_c),
        sigma_a=gaussian_sigma(2.0 * params.B_y * (params.B_K + params.B_theta),
                               params.eps_a, params.delta_a),
        sigma_g=gaussian_sigma(2.0 * params.C_g, params.eps_g, params.delta_g),
    )


def clip(G: np.ndarray, C_g: float) -> np.ndarray:
    """Rescale so the Frobenius norm never exceeds ``C_g``.

    The bound is enforced exactly: rescaling repeats if rounding leaves the
    recomputed norm a few ulps above the threshold.
    """
    if C_g <= 0:
        raise ValueError("clip threshold must be positive")
    g = np.asarray(G, dtype=float).copy()
    norm = float(np.linalg.norm(g))
    while norm > C_g:
        g *= C_g / norm
        norm = float(np.linalg.norm(g))
    return g


def perturb_states(h_hat_c: np.ndarray, h_hat_a: np.ndarray,
                   params: PrivacyParams, rng: np.random.Generator,
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Add independent Gaussian noise to the two transmitted states."""
    if not params.calibrated:
        raise ValueError("privacy params are uncalibrated; run calibrate() first")
    h_c = np.asarray(h_hat_c, dtype=float)
    h_a = np.asarray(h_hat_a, dtype=float)
    noisy_c = h_c + params.sigma_c * rng.standard_normal(h_c.shape)
    noisy_a = h_a + params.sigma_a * rng.standard_normal(h_a.shape)
    return noisy_c, noisy_a


def perturb_gradient(grad: np.ndarray, params: PrivacyParams,
                     rng: np.random.Generator) -> np.ndarray:
    """Clip to the Frobenius threshold, then add Gaussian noise."""
    if not params.calibrated:
        raise ValueError("privacy params are uncalibrated; run calibrate() first")
    clipped = clip(grad, params.C_g)
    return clipped + params.sigma_g * rng.standard_normal(clipped.shape)


def noise_stream(seed: int, direction: int, client_id: int, t: int,
                 k: int = 0) -> np.random.Generator:
    """Deterministic noise substream for one message.

    Keyed by (direction, client, t) plus the round index so that epochs
    revisiting the same time step never reuse noise.
    """
    return np.random.default_rng([int(seed), int(direction), int(client_id),
                                  int(t), int(k)])
