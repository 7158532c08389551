"""Block-partitioned linear state-space systems.

Ground truth for the simulator: a state matrix A partitioned into client
blocks A_mn, a block-diagonal output matrix C, and isotropic Gaussian
process/measurement noise. Also hosts the steady-state covariance solver
and the non-IID diagnostics built on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import kron, spectral_radius, vec, unvec

_LYAPUNOV_RESIDUAL_TOL = 1e-9
_LYAPUNOV_COND_LIMIT = 1e12
_BLOCK_ZERO_TOL = 1e-9


@dataclass(frozen=True)
class BlockSpec:
    """Client partition of the joint system: M clients, per-client state and
    measurement dimensions."""

    dims: tuple[int, ...]
    obs_dims: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "obs_dims", tuple(int(d) for d in self.obs_dims))
        if len(self.dims) < 1:
            raise ValueError("need at least one client")
        if len(self.obs_dims) != len(self.dims):
            raise ValueError("obs_dims length must match dims length")
        if any(d < 1 for d in self.dims) or any(d < 1 for d in self.obs_dims):
            raise ValueError("all state and measurement dimensions must be >= 1")

    @property
    def n_clients(self) -> int:
        return len(self.dims)

    @property
    def state_dim(self) -> int:
        return sum(self.dims)

    @property
    def obs_dim(self) -> int:
        return sum(self.obs_dims)

    @property
    def state_offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.cumsum((0,) + self.dims[:-1]))

    @property
    def obs_offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.cumsum((0,) + self.obs_dims[:-1]))

    def state_slice(self, m: int) -> slice:
        off = self.state_offsets[m]
        return slice(off, off + self.dims[m])

    def obs_slice(self, m: int) -> slice:
        off = self.obs_offsets[m]
        return slice(off, off + self.obs_dims[m])


@dataclass(frozen=True)
class BlockSystem:
    """Ground-truth LTI system with immutable block partition.

    A is square of side sum(dims); C must be block diagonal (off-diagonal
    blocks exactly zero). Noise covariances are q_proc*I and r_meas*I.
    """

    spec: BlockSpec
    A: np.ndarray
    C: np.ndarray
    q_proc: float
    r_meas: float

    def __post_init__(self) -> None:
        a = np.array(self.A, dtype=float)
        c = np.array(self.C, dtype=float)
        a.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "C", c)
        n, p = self.spec.state_dim, self.spec.obs_dim
        if a.shape != (n, n):
            raise ValueError(f"A must be {n}x{n}, got {a.shape}")
        if c.shape != (p, n):
            raise ValueError(f"C must be {p}x{n}, got {c.shape}")
        if self.q_proc < 0 or self.r_meas < 0:
            raise ValueError("noise variances must be nonnegative")
        for m in range(self.spec.n_clients):
            for k in range(self.spec.n_clients):
                if m == k:
                    continue
                block = c[self.spec.obs_slice(m), self.spec.state_slice(k)]
                if block.size and np.max(np.abs(block)) != 0.0:
                    raise ValueError("C must be block diagonal")

    def a_block(self, m: int, n: int) -> np.ndarray:
        return self.A[self.spec.state_slice(m), self.spec.state_slice(n)]

    def c_block(self, m: int) -> np.ndarray:
        return self.C[self.spec.obs_slice(m), self.spec.state_slice(m)]


@dataclass(frozen=True)
class Trajectory:
    """Simulated states and measurements for t = 0..T (T+1 rows each)."""

    spec: BlockSpec
    states: np.ndarray
    measurements: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.states, dtype=float)
        y = np.asarray(self.measurements, dtype=float)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "measurements", y)
        if s.ndim != 2 or s.shape[1] != self.spec.state_dim:
            raise ValueError("states must be (T+1) x state_dim")
        if y.ndim != 2 or y.shape[1] != self.spec.obs_dim:
            raise ValueError("measurements must be (T+1) x obs_dim")
        if s.shape[0] != y.shape[0]:
            raise ValueError("states and measurements must cover the same steps")

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    def measurements_for(self, m: int) -> np.ndarray:
        return self.measurements[:, self.spec.obs_slice(m)]

    def states_for(self, m: int) -> np.ndarray:
        return self.states[:, self.spec.state_slice(m)]


def simulate(system: BlockSystem, T: int, seed: int, initial_state: np.ndarray) -> Trajectory:
    """Run h^t = A h^{t-1} + w^t, y^t = C h^t + v^t for t = 1..T.

    Noise is drawn from a generator seeded with ``seed``; identical inputs
    give identical trajectories. Row 0 holds the initial state and its
    (noisy) measurement.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    h0 = np.asarray(initial_state, dtype=float).reshape(-1)
    n = system.spec.state_dim
    p = system.spec.obs_dim
    if h0.size != n:
        raise ValueError(f"initial state must have dimension {n}, got {h0.size}")

    rng = np.random.default_rng(seed)
    w = np.sqrt(system.q_proc) * rng.standard_normal((T, n))
    v = np.sqrt(system.r_meas) * rng.standard_normal((T + 1, p))

    states = np.empty((T + 1, n))
    states[0] = h0
    for t in range(1, T + 1):
        states[t] = system.A @ states[t - 1] + w[t - 1]
    measurements = states @ system.C.T + v
    return Trajectory(spec=system.spec, states=states, measurements=measurements)


@dataclass(frozen=True)
class SteadyStateCovariance:
    """Stationary state covariance: solution of Sigma = A Sigma A^T + q I."""

    spec: BlockSpec
    sigma: np.ndarray
    per_block_variances: tuple[np.ndarray, ...] = field(init=False)
    cross_blocks: dict = field(init=False)

    def __post_init__(self) -> None:
        s = np.array(self.sigma, dtype=float)
        s.setflags(write=False)
        object.__setattr__(self, "sigma", s)
        diag = tuple(s[self.spec.state_slice(m), self.spec.state_slice(m)]
                     for m in range(self.spec.n_clients))
        cross = {
            (m, n): s[self.spec.state_slice(m), self.spec.state_slice(n)]
            for m in range(self.spec.n_clients)
            for n in range(self.spec.n_clients)
            if m != n
        }
        object.__setattr__(self, "per_block_variances", diag)
        object.__setattr__(self, "cross_blocks", cross)


def steady_state_covariance(A: np.ndarray, q_proc: float,
                            spec: BlockSpec | None = None) -> SteadyStateCovariance:
    """Solve the discrete Lyapunov equation Sigma = A Sigma A^T + q I.

    Solved directly through vec(Sigma) = (I - A kron A)^{-1} vec(q I).
    Requires rho(A) < 1 and a well-conditioned linear system.
    """
    a = np.atleast_2d(np.asarray(A, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise ValueError("A must be square")
    if q_proc < 0:
        raise ValueError("q_proc must be nonnegative")
    rho = spectral_radius(a)
    if rho >= 1.0:
        raise ValueError(f"unstable system, no steady state (rho(A) = {rho:.6g})")

    n = a.shape[0]
    lhs = np.eye(n * n) - kron(a, a)
    cond = np.linalg.cond(lhs)
    if cond > _LYAPUNOV_COND_LIMIT:
        raise ValueError(f"Lyapunov system too ill-conditioned (cond ~ {cond:.3g})")
    sigma_vec = np.linalg.solve(lhs, vec(q_proc * np.eye(n)))
    sigma = unvec(sigma_vec, n, n)
    sigma = 0.5 * (sigma + sigma.T)

    residual = np.linalg.norm(sigma - a @ sigma @ a.T - q_proc * np.eye(n))
    scale = max(np.linalg.norm(sigma), 1e-300)
    if residual / scale > _LYAPUNOV_RESIDUAL_TOL:
        raise ValueError(f"Lyapunov residual too large: {residual / scale:.3g}")

    if spec is None:
        spec = BlockSpec(dims=(n,), obs_dims=(n,))
    return SteadyStateCovariance(spec=spec, sigma=sigma)


def non_iid_diagnostics(cov: SteadyStateCovariance, spec: BlockSpec) -> dict:
    """Report whether per-client stationary states are identically
    distributed (equal diagonal-block spectra) and independent (zero cross
    blocks)."""
    if cov.sigma.shape[0] != spec.state_dim:
        raise ValueError("covariance side does not match the block spec")
    spectra = [
        np.sort(np.linalg.eigvalsh(cov.sigma[spec.state_slice(m), spec.state_slice(m)]))
        for m in range(spec.n_clients)
    ]

    same_sizes = len({s.size for s in spectra}) == 1
    if same_sizes:
        variance_gap = max(
            (float(np.max(np.abs(si - sj)))
             for i, si in enumerate(spectra) for sj in spectra[i + 1:]),
            default=0.0,
        )
        identical = variance_gap <= _BLOCK_ZERO_TOL
    else:
        variance_gap = float("nan")
        identical = False

    cross_norm = max(
        (float(np.linalg.norm(cov.sigma[spec.state_slice(m), spec.state_slice(n)]))
         for m in range(spec.n_clients) for n in range(m + 1, spec.n_clients)),
        default=0.0,
    )
    independent = cross_norm < _BLOCK_ZERO_TOL

    return {
        "identical": identical,
        "independent": independent,
        "variance_gap": variance_gap,
        "cross_norm": cross_norm,
    }
