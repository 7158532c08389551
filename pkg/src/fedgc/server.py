"""Server model: learns the off-diagonal state-matrix blocks.

The server predicts each client's next state from all clients' estimates
(known diagonal block plus learnable cross blocks), scores the prediction
against labels derived from the augmented client estimates, and produces
two kinds of gradients: block gradients for its own update and per-client
state gradients sent back to the clients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ssm import BlockSpec


@dataclass
class ServerModel:
    """Known diagonal blocks A_mm plus learnable cross blocks A_hat[(m, n)].

    Cross blocks exist for every ordered pair m != n and start at zero (the
    no-causality null). Diagonal blocks are never learnable.
    """

    spec: BlockSpec
    A_diag: tuple[np.ndarray, ...]
    gamma: float
    A_hat: dict = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        diag = []
        for m, block in enumerate(self.A_diag):
            b = np.array(np.atleast_2d(block), dtype=float)
            b.setflags(write=False)
            p = self.spec.dims[m]
            if b.shape != (p, p):
                raise ValueError(f"A_diag[{m}] must be {p}x{p}, got {b.shape}")
            diag.append(b)
        if len(diag) != self.spec.n_clients:
            raise ValueError("need one diagonal block per client")
        self.A_diag = tuple(diag)

        pairs = [(m, n) for m in range(self.spec.n_clients)
                 for n in range(self.spec.n_clients) if m != n]
        if self.A_hat is None:
            self.A_hat = {(m, n): np.zeros((self.spec.dims[m], self.spec.dims[n]))
                          for m, n in pairs}
        else:
            blocks = {}
            for m, n in pairs:
                block = np.atleast_2d(np.asarray(self.A_hat[(m, n)], dtype=float))
                want = (self.spec.dims[m], self.spec.dims[n])
                if block.shape != want:
                    raise ValueError(f"A_hat[{(m, n)}] must be {want}, got {block.shape}")
                blocks[(m, n)] = block.copy()
            self.A_hat = blocks

    def _check_states(self, states: list, what: str) -> list[np.ndarray]:
        if len(states) != self.spec.n_clients:
            raise ValueError(f"need one {what} per client")
        out = []
        for m, s in enumerate(states):
            v = np.asarray(s, dtype=float).reshape(-1)
            if v.size != self.spec.dims[m]:
                raise ValueError(f"{what} for client {m} must have dimension "
                                 f"{self.spec.dims[m]}, got {v.size}")
            out.append(v)
        return out

    def predict(self, h_hat_c_all: list) -> np.ndarray:
        """Concatenated predictions A_mm h_c_m + sum_n A_hat_mn h_c_n."""
        states = self._check_states(h_hat_c_all, "client estimate")
        parts = []
        for m in range(self.spec.n_clients):
            pred = self.A_diag[m] @ states[m]
            for n in range(self.spec.n_clients):
                if n != m:
                    pred = pred + self.A_hat[(m, n)] @ states[n]
            parts.append(pred)
        return np.concatenate(parts)

    def labels(self, h_hat_a_all: list) -> np.ndarray:
        """Concatenated training labels A_mm @ h_hat_a_m."""
        states = self._check_states(h_hat_a_all, "augmented estimate")
        return np.concatenate([self.A_diag[m] @ states[m]
                               for m in range(self.spec.n_clients)])

    @staticmethod
    def loss(labels: np.ndarray, predictions: np.ndarray) -> float:
        """Squared Euclidean distance between labels and predictions."""
        la = np.asarray(labels, dtype=float).reshape(-1)
        pr = np.asarray(predictions, dtype=float).reshape(-1)
        if la.size != pr.size:
            raise ValueError("labels and predictions must have equal dimension")
        diff = la - pr
        return float(diff @ diff)

    def make_round(self, t: int, h_hat_c_all: list, h_hat_a_all: list) -> "ServerRound":
        """Assemble one round: predictions, labels, and the loss."""
        h_c = self._check_states(h_hat_c_all, "client estimate")
        h_a = self._check_states(h_hat_a_all, "augmented estimate")
        predictions = self.predict(h_c)
        labs = self.labels(h_a)
        return ServerRound(t=t, h_hat_c_all=tuple(h_c), h_hat_a_all=tuple(h_a),
                           H_s=predictions, H_a=labs, loss=self.loss(labs, predictions))

    def _error_block(self, rnd: "ServerRound", m: int) -> np.ndarray:
        sl = self.spec.state_slice(m)
        return rnd.H_a[sl] - rnd.H_s[sl]

    def grad_A(self, rnd: "ServerRound", m: int, n: int) -> np.ndarray:
        """Gradient of the round loss with respect to A_hat[(m, n)]."""
        if n == m:
            raise ValueError("diagonal blocks are known; no gradient is defined")
        return -2.0 * np.outer(self._error_block(rnd, m), rnd.h_hat_c_all[n])

    def all_grads(self, rnd: "ServerRound") -> dict:
        """Gradients for every learnable block, all from the same round."""
        return {(m, n): self.grad_A(rnd, m, n)
                for m in range(self.spec.n_clients)
                for n in range(self.spec.n_clients) if n != m}

    def apply_update(self, grads: dict) -> None:
        """Simultaneous descent step A_hat_mn -= gamma * grad_mn."""
        for (m, n), grad in grads.items():
            if m == n:
                raise ValueError("diagonal blocks are known; they are never updated")
            g = np.atleast_2d(np.asarray(grad, dtype=float))
            if g.shape != self.A_hat[(m, n)].shape:
                raise ValueError(f"gradient for block {(m, n)} has shape {g.shape}, "
                                 f"expected {self.A_hat[(m, n)].shape}")
            self.A_hat[(m, n)] = self.A_hat[(m, n)] - self.gamma * g

    def grad_state(self, rnd: "ServerRound", m: int) -> np.ndarray:
        """Gradient of the round loss with respect to client m's augmented
        estimate; this is the vector transmitted back to client m."""
        return 2.0 * self.A_diag[m].T @ self._error_block(rnd, m)


@dataclass(frozen=True)
class ServerRound:
    """One server round at time t: inputs, predictions, labels, and loss.

    The state lists hold the previous time step's estimates, in client
    order; H_s and H_a are their concatenated predictions and labels.
    """

    t: int
    h_hat_c_all: tuple[np.ndarray, ...]
    h_hat_a_all: tuple[np.ndarray, ...]
    H_s: np.ndarray
    H_a: np.ndarray
    loss: float
