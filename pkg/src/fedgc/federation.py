"""Federated training loop and its message transport.

Each time step is one round: every client sends its (augmented, plain)
estimated-state tuple to the server, the server scores its predictions,
answers every client with a state gradient, and both sides take one
descent step. Rounds repeat over epochs until the budget is exhausted or
the server loss reaches tolerance.

The bus guarantees in-order, exactly-once delivery per endpoint and a
round barrier: the server gathers all M tuples before computing anything,
and every client receives its gradient before updating. Assembly is by
client id, never by arrival order.
"""

from __future__ import annotations

import json
import queue
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import privacy as dp
from .client import AugmentedClientModel
from .server import ServerModel
from .ssm import BlockSpec

MODES = ("full", "no_augmentation", "no_server", "pretrained_clients")

_PRETRAIN_SETTLE_TOL = 1e-10


# ---------------------------------------------------------------------------
# messages and wire format

@dataclass(frozen=True)
class ClientToServerMsg:
    client_id: int
    t: int
    k: int
    h_hat_a: np.ndarray
    h_hat_c: np.ndarray


@dataclass(frozen=True)
class ServerToClientMsg:
    client_id: int
    t: int
    k: int
    state_grad: np.ndarray


@dataclass(frozen=True)
class SetupMsg:
    """One-time pre-training message: diagonal block plus the time-0 tuple."""
    client_id: int
    A_mm: np.ndarray
    h_hat_a: np.ndarray
    h_hat_c: np.ndarray


def encode_message(msg) -> str:
    """One newline-free JSON line per message; floats round-trip losslessly."""
    if isinstance(msg, ClientToServerMsg):
        body = {"type": "c2s", "client_id": msg.client_id, "t": msg.t, "k": msg.k,
                "payload": {"h_hat_a": list(map(float, msg.h_hat_a)),
                            "h_hat_c": list(map(float, msg.h_hat_c))}}
    elif isinstance(msg, ServerToClientMsg):
        body = {"type": "s2c", "client_id": msg.client_id, "t": msg.t, "k": msg.k,
                "payload": {"state_grad": list(map(float, msg.state_grad))}}
    elif isinstance(msg, SetupMsg):
        body = {"type": "setup", "client_id": msg.client_id, "t": 0, "k": 0,
                "payload": {"A_mm": [list(map(float, row)) for row in np.atleast_2d(msg.A_mm)],
                            "h_hat_a": list(map(float, msg.h_hat_a)),
                            "h_hat_c": list(map(float, msg.h_hat_c))}}
    else:
        raise ValueError(f"unknown message type: {type(msg).__name__}")
    return json.dumps(body, separators=(",", ":"))


def decode_message(line: str):
    body = json.loads(line)
    kind = body.get("type")
    payload = body.get("payload", {})
    if kind == "c2s":
        return ClientToServerMsg(client_id=body["client_id"], t=body["t"], k=body["k"],
                                 h_hat_a=np.array(payload["h_hat_a"], dtype=float),
                                 h_hat_c=np.array(payload["h_hat_c"], dtype=float))
    if kind == "s2c":
        return ServerToClientMsg(client_id=body["client_id"], t=body["t"], k=body["k"],
                                 state_grad=np.array(payload["state_grad"], dtype=float))
    if kind == "setup":
        return SetupMsg(client_id=body["client_id"],
                        A_mm=np.array(payload["A_mm"], dtype=float),
                        h_hat_a=np.array(payload["h_hat_a"], dtype=float),
                        h_hat_c=np.array(payload["h_hat_c"], dtype=float))
    raise ValueError(f"unknown wire message type: {kind!r}")


# ---------------------------------------------------------------------------
# transports

class BusTimeout(TimeoutError):
    """Raised when a round barrier expires; lists the clients still missing."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"round barrier timed out; missing clients {self.missing}")


class InProcessBus:
    """Queue-backed transport: thread-safe producers, one consumer per endpoint."""

    def __init__(self, n_clients: int):
        if n_clients < 1:
            raise ValueError("bus needs at least one client endpoint")
        self.n_clients = n_clients
        self._to_server: queue.Queue = queue.Queue()
        self._to_client = {m: queue.Queue() for m in range(n_clients)}

    def send_to_server(self, msg) -> None:
        if not 0 <= msg.client_id < self.n_clients:
            raise ValueError(f"unknown sender {msg.client_id}")
        self._to_server.put(msg)

    def send_to_client(self, msg: ServerToClientMsg) -> None:
        if msg.client_id not in self._to_client:
            raise ValueError(f"unknown recipient {msg.client_id}")
        self._to_client[msg.client_id].put(msg)

    def gather_at_server(self, count: int, timeout: float | None = None) -> list:
        """Barrier: collect ``count`` client messages, returned in id order."""
        got = {}
        deadline = None if timeout is None else time.monotonic() + timeout
        while len(got) < count:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                msg = self._to_server.get(timeout=remaining)
            except queue.Empty:
                raise BusTimeout(set(range(count)) - set(got)) from None
            if msg.client_id in got:
                raise ValueError(f"duplicate message from client {msg.client_id} in one round")
            got[msg.client_id] = msg
        return [got[m] for m in sorted(got)]

    def recv_at_client(self, m: int, timeout: float | None = None):
        try:
            return self._to_client[m].get(timeout=timeout)
        except queue.Empty:
            raise BusTimeout({m}) from None


class StreamTransport:
    """Wire-format transport over a connected stream socket.

    Messages travel as newline-delimited JSON lines; in-order, exactly-once
    delivery is inherited from the stream semantics.
    """

    def __init__(self, sock):
        self._sock = sock
        self._file = sock.makefile("rwb")

    def send(self, msg) -> None:
        self._file.write((encode_message(msg) + "\n").encode("utf-8"))
        self._file.flush()

    def recv(self):
        line = self._file.readline()
        if not line:
            raise ConnectionError("stream closed while waiting for a message")
        return decode_message(line.decode("utf-8"))

    def close(self) -> None:
        self._file.close()
        self._sock.close()


# ---------------------------------------------------------------------------
# training configuration and log

@dataclass(frozen=True)
class TrainingConfig:
    """Round schedule and learning rates for one training run."""

    eta1: float
    eta2: float
    gamma: float
    epochs: int
    tol: float
    mode: str = "full"
    privacy: dp.PrivacyParams | None = None
    window: int = 500
    seed: int = 0
    snapshot_every: int | None = None
    barrier_timeout: float | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose one of {MODES}")
        if self.privacy is not None and not self.privacy.calibrated:
            raise ValueError("privacy params must be calibrated before training")


@dataclass(frozen=True)
class LogRecord:
    epoch: int
    t: int
    k: int
    loss_server: float | None
    client_losses: tuple[float, ...]
    grad_A_norm: float | None
    grad_theta_norms: tuple[float, ...] | None
    messages_c2s: int
    messages_s2c: int
    wall_s: float


@dataclass(frozen=True)
class Snapshot:
    k: int
    epoch: int
    t: int
    thetas: tuple[np.ndarray, ...]
    A_hat: dict


@dataclass
class TrainingLog:
    mode: str
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    pretrain_rounds: int = 0
    wall_clock_s: float = 0.0

    def server_losses(self) -> list:
        return [r.loss_server for r in self.records if r.loss_server is not None]


@dataclass(frozen=True)
class TrainingResult:
    log: TrainingLog
    thetas: tuple[np.ndarray, ...]
    A_hat: dict


@dataclass(frozen=True)
class ClientStream:
    """Pre-computed per-client inputs: measurements and filter estimates,
    both (T+1) rows with row 0 the initial time."""

    measurements: np.ndarray
    h_hat_c: np.ndarray

    def __post_init__(self) -> None:
        y = np.atleast_2d(np.asarray(self.measurements, dtype=float))
        h = np.atleast_2d(np.asarray(self.h_hat_c, dtype=float))
        if y.shape[0] != h.shape[0]:
            raise ValueError("measurements and estimates must cover the same steps")
        object.__setattr__(self, "measurements", y)
        object.__setattr__(self, "h_hat_c", h)

    @property
    def T(self) -> int:
        return self.measurements.shape[0] - 1


# ---------------------------------------------------------------------------
# orchestration

def _check_inputs(streams, clients, server) -> tuple[BlockSpec, int]:
    spec = server.spec
    if len(streams) != spec.n_clients or len(clients) != spec.n_clients:
        raise ValueError("streams/clients must match the server's block spec")
    T = streams[0].T
    for m, (stream, client) in enumerate(zip(streams, clients)):
        if stream.T != T:
            raise ValueError(f"inconsistent stream lengths: client {m} has T={stream.T}, "
                             f"expected {T}")
        if stream.measurements.shape[1] != spec.obs_dims[m]:
            raise ValueError(f"client {m} measurements have wrong dimension")
        if stream.h_hat_c.shape[1] != spec.dims[m]:
            raise ValueError(f"client {m} estimates have wrong dimension")
        if client.base.state_dim != spec.dims[m] or client.base.obs_dim != spec.obs_dims[m]:
            raise ValueError(f"client {m} model does not match the block spec")
    return spec, T


def _snapshot_cadence(config: TrainingConfig, spec: BlockSpec, T: int) -> int:
    if config.snapshot_every is not None:
        return max(1, config.snapshot_every)
    scalar = all(d == 1 for d in spec.dims) and all(o == 1 for o in spec.obs_dims)
    return 1 if scalar else max(1, T)


def _take_snapshot(log: TrainingLog, server: ServerModel, clients, k, epoch, t) -> None:
    log.snapshots.append(Snapshot(
        k=k, epoch=epoch, t=t,
        thetas=tuple(c.theta.copy() for c in clients),
        A_hat={pair: block.copy() for pair, block in server.A_hat.items()}))


def run_training(streams: list, clients: list, server: ServerModel,
                 config: TrainingConfig, oracle=None) -> TrainingResult:
    """Run the federated loop; returns the log and final parameters.

    ``oracle`` is accepted for interface completeness (comparisons against
    it are computed by the experiments layer, not inside the loop).

    The tolerance stop arms only after the server loss first exceeds
    ``tol``: zero-initialized parameters make the very first round's loss
    exactly zero, which must not end the run before any learning happens.
    """
    del oracle
    if config.mode == "no_server":
        return _run_no_server(streams, clients, config)
    if config.mode == "pretrained_clients":
        return _run_pretrained(streams, clients, server, config)
    return _run_with_server(streams, clients, server, config,
                            freeze_theta=(config.mode == "no_augmentation"),
                            log=TrainingLog(mode=config.mode))


def _run_with_server(streams, clients, server, config, freeze_theta, log,
                     ) -> TrainingResult:
    spec, T = _check_inputs(streams, clients, server)
    M = spec.n_clients
    start = time.perf_counter()
    cadence = _snapshot_cadence(config, spec, T)

    bus = InProcessBus(M)
    if T >= 1:
        for m in range(M):
            theta_y0 = clients[m].theta @ streams[m].measurements[0]
            h_a0 = streams[m].h_hat_c[0] + theta_y0
            clients[m].h_hat_a = h_a0.copy()
            bus.send_to_server(SetupMsg(client_id=m, A_mm=clients[m].base.A,
                                        h_hat_a=h_a0, h_hat_c=streams[m].h_hat_c[0]))
        setups = bus.gather_at_server(M, timeout=config.barrier_timeout)
        for msg in setups:
            if not np.array_equal(msg.A_mm, server.A_diag[msg.client_id]):
                raise ValueError(f"setup mismatch: client {msg.client_id} announced a "
                                 f"different diagonal block than the server holds")
        cache = {m: (setups[m].h_hat_a, setups[m].h_hat_c) for m in range(M)}

    k = 0
    tol_armed = False
    stop = False
    _take_snapshot(log, server, clients, k=-1, epoch=-1, t=0)
    for epoch in range(config.epochs):
        if stop:
            break
        for t in range(1, T + 1):
            # clients: advance the augmented model and send the tuple
            for m in range(M):
                client = clients[m]
                y_t = streams[m].measurements[t]
                client.predict()
                h_hat_a = client.estimate(streams[m].h_hat_c[t], y_t)
                send_a, send_c = h_hat_a, streams[m].h_hat_c[t]
                if config.privacy is not None:
                    rng = dp.noise_stream(config.seed, dp.C2S, m, t, k)
                    send_c, send_a = dp.perturb_states(send_c, send_a, config.privacy, rng)
                bus.send_to_server(ClientToServerMsg(client_id=m, t=t, k=k,
                                                     h_hat_a=send_a, h_hat_c=send_c))

            # server: barrier, round on the previous tuples, answer, update
            inbound = bus.gather_at_server(M, timeout=config.barrier_timeout)
            rnd = server.make_round(t, [cache[m][1] for m in range(M)],
                                    [cache[m][0] for m in range(M)])
            grads = server.all_grads(rnd)
            for m in range(M):
                grad = server.grad_state(rnd, m)
                if config.privacy is not None:
                    rng = dp.noise_stream(config.seed, dp.S2C, m, t, k)
                    grad = dp.perturb_gradient(grad, config.privacy, rng)
                bus.send_to_client(ServerToClientMsg(client_id=m, t=t, k=k,
                                                     state_grad=grad))
            server.apply_update(grads)
            cache = {msg.client_id: (msg.h_hat_a, msg.h_hat_c) for msg in inbound}

            # clients: consume the gradient, score, and update theta
            client_losses = []
            theta_norms = [] if not freeze_theta else None
            for m in range(M):
                client = clients[m]
                y_t = streams[m].measurements[t]
                y_prev = streams[m].measurements[t - 1]
                reply = bus.recv_at_client(m, timeout=config.barrier_timeout)
                client_losses.append(client.loss(y_t))
                if not freeze_theta:
                    grad_local = client.grad_theta(y_t, y_prev, streams[m].h_hat_c[t - 1])
                    theta_norms.append(float(np.linalg.norm(grad_local)))
                    client.update_theta(grad_local, reply.state_grad, y_prev)

            grad_A_norm = float(np.sqrt(sum(
                float(np.sum(g * g)) for g in grads.values())))
            log.records.append(LogRecord(
                epoch=epoch, t=t, k=k, loss_server=rnd.loss,
                client_losses=tuple(client_losses),
                grad_A_norm=grad_A_norm,
                grad_theta_norms=None if theta_norms is None else tuple(theta_norms),
                messages_c2s=M, messages_s2c=M,
                wall_s=time.perf_counter() - start))
            k += 1
            if (k - 1) % cadence == 0:
                _take_snapshot(log, server, clients, k=k, epoch=epoch, t=t)

            if rnd.loss > config.tol:
                tol_armed = True
            elif tol_armed:
                stop = True
                break

    log.wall_clock_s = time.perf_counter() - start
    return TrainingResult(log=log,
                          thetas=tuple(c.theta.copy() for c in clients),
                          A_hat={p: b.copy() for p, b in server.A_hat.items()})


def _run_no_server(streams, clients, config) -> TrainingResult:
    """Server-free baseline: each client descends its own loss only."""
    T = streams[0].T
    for m, stream in enumerate(streams):
        if stream.T != T:
            raise ValueError(f"inconsistent stream lengths: client {m} has T={stream.T}")
    start = time.perf_counter()
    log = TrainingLog(mode="no_server")

    for m, client in enumerate(clients):
        theta_y0 = client.theta @ streams[m].measurements[0]
        client.h_hat_a = streams[m].h_hat_c[0] + theta_y0

    k = 0
    for epoch in range(config.epochs):
        for t in range(1, T + 1):
            client_losses = []
            theta_norms = []
            for m, client in enumerate(clients):
                y_t = streams[m].measurements[t]
                y_prev = streams[m].measurements[t - 1]
                client.predict()
                client.estimate(streams[m].h_hat_c[t], y_t)
                client_losses.append(client.loss(y_t))
                grad_local = client.grad_theta(y_t, y_prev, streams[m].h_hat_c[t - 1])
                theta_norms.append(float(np.linalg.norm(grad_local)))
                client.theta = client.theta - config.eta1 * grad_local
            log.records.append(LogRecord(
                epoch=epoch, t=t, k=k, loss_server=None,
                client_losses=tuple(client_losses), grad_A_norm=None,
                grad_theta_norms=tuple(theta_norms),
                messages_c2s=0, messages_s2c=0,
                wall_s=time.perf_counter() - start))
            k += 1

    log.wall_clock_s = time.perf_counter() - start
    return TrainingResult(log=log,
                          thetas=tuple(c.theta.copy() for c in clients),
                          A_hat={})


def _run_pretrained(streams, clients, server, config) -> TrainingResult:
    """Pre-train thetas locally to settling, then train the server alone."""
    one_epoch = replace(config, eta2=0.0, gamma=0.0, epochs=1, mode="no_server")
    rounds = 0
    T = streams[0].T
    for _ in range(config.epochs):
        before = [c.theta.copy() for c in clients]
        _run_no_server(streams, clients, one_epoch)
        rounds += T
        drift = max(float(np.max(np.abs(c.theta - b)))
                    for c, b in zip(clients, before))
        if drift < _PRETRAIN_SETTLE_TOL:
            break

    log = TrainingLog(mode="pretrained_clients", pretrain_rounds=rounds)
    return _run_with_server(streams, clients, server, config,
                            freeze_theta=True, log=log)


def run_baseline(mode: str, streams: list, clients: list, server: ServerModel,
                 config: TrainingConfig) -> TrainingResult:
    """Run one of the three reference modes with the given config."""
    if mode not in ("no_augmentation", "no_server", "pretrained_clients"):
        raise ValueError(f"unknown baseline mode {mode!r}")
    return run_training(streams, clients, server, replace(config, mode=mode))


def frozen_time_round(streams: list, clients: list, server: ServerModel,
                      t: int) -> tuple[tuple, dict]:
    """One joint update with the data frozen at time index t.

    Recomputes every augmented estimate from the current parameters (so
    repeated calls iterate the joint update at fixed data), runs the server
    round and both descent steps, and returns (thetas, A_hat) after the
    step. Models are advanced in place.
    """
    spec, T = _check_inputs(streams, clients, server)
    if not 1 <= t <= T:
        raise ValueError(f"t must lie in [1, {T}]")
    M = spec.n_clients

    h_c_prev = [streams[m].h_hat_c[t - 1] for m in range(M)]
    h_a_prev = [h_c_prev[m] + clients[m].theta @ streams[m].measurements[t - 1]
                for m in range(M)]
    rnd = server.make_round(t, h_c_prev, h_a_prev)
    grads = server.all_grads(rnd)
    state_grads = [server.grad_state(rnd, m) for m in range(M)]
    server.apply_update(grads)
    for m in range(M):
        y_t = streams[m].measurements[t]
        y_prev = streams[m].measurements[t - 1]
        grad_local = clients[m].grad_theta(y_t, y_prev, h_c_prev[m])
        clients[m].update_theta(grad_local, state_grads[m], y_prev)
    return (tuple(c.theta.copy() for c in clients),
            {p: b.copy() for p, b in server.A_hat.items()})
