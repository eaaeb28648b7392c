"""Federated rounds: local AdamW training, weighted averaging, lookahead momentum."""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import lora
from .autodiff import Tape
from .lora import DenseDelta, LowRankAdapter, Role
from .optim import AdamW
from .privacy import ClientDataset, dp_noise
from .seeding import derive_seed
from .tinylm import TinyLM, lm_loss_graph
from .tokenizer import CharTokenizer


class RoundError(RuntimeError):
    pass


class UploadRefused(PermissionError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    eta_local: float = 1e-4
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_K: int = 3
    batch_size: int = 16

    def problems(self) -> list[str]:
        out = []
        for name in ("eta_local", "eps", "epochs_K", "batch_size"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                out.append(f"{name} must be in (0,1)")
        return out

    def __post_init__(self):
        errs = self.problems()
        if errs:
            raise ValueError("; ".join(errs))

    def make_optimizer(self) -> AdamW:
        return AdamW(lr=self.eta_local, weight_decay=self.weight_decay, beta1=self.beta1,
                     beta2=self.beta2, eps=self.eps)


@dataclass(frozen=True)
class DefenseConfig:
    """Client-side protection of the secure upload."""

    scrub: bool = True
    dp: bool = False
    clip_norm: float = 1.0
    sigma: float = 0.5

    @classmethod
    def from_name(cls, name: str, clip_norm: float = 1.0, sigma: float = 0.5) -> "DefenseConfig":
        table = {"scrub": (True, False), "dp": (False, True), "scrub+dp": (True, True)}
        if name not in table:
            raise ValueError(f"unknown defense {name!r}; expected one of {sorted(table)}")
        s, d = table[name]
        return cls(s, d, clip_norm, sigma)


@dataclass
class ServerState:
    global_adapter: LowRankAdapter
    momentum: dict[str, np.ndarray]
    t: int = 0
    m: float = 0.5
    eta_global: float = 0.01
    T: int = 20

    def __post_init__(self):
        if not 0.0 <= self.m < 1.0:
            raise ValueError("m must be in [0,1)")
        if self.eta_global <= 0:
            raise ValueError("eta_global must be positive")
        params = self.global_adapter.params()
        if set(params) != set(self.momentum) or any(
                params[k].shape != self.momentum[k].shape for k in params):
            raise ValueError("momentum shapes must match the global adapter")
        if not 0 <= self.t <= self.T:
            raise ValueError(f"round counter {self.t} outside [0, {self.T}]")

    @classmethod
    def start(cls, adapter: LowRankAdapter, m: float = 0.5, eta_global: float = 0.01,
              T: int = 20) -> "ServerState":
        """Fresh server state; the momentum starts at zero."""
        g = adapter.copy(role=Role.GLOBAL)
        return cls(g, {k: np.zeros_like(v) for k, v in g.params().items()}, 0, m, eta_global, T)


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    secure_adapter: LowRankAdapter | None = None
    revealing_adapter: LowRankAdapter | None = None
    moments: dict[str, AdamW] = field(default_factory=dict)


@dataclass
class LocalResult:
    adapter: LowRankAdapter
    steps: int
    losses: list[float]
    optimizer: AdamW


# ---------------------------------------------------------------- client side


def view_tokens(dataset: ClientDataset, view: str, tokenizer: CharTokenizer,
                context_len: int) -> list[list[int]]:
    if view not in ("raw", "masked"):
        raise ValueError(f"view must be 'raw' or 'masked', got {view!r}")
    docs = dataset.raw_view if view == "raw" else dataset.masked_view
    return [tokenizer.encode_doc(d.text)[: context_len + 1] for d in docs]


def local_train(model: TinyLM, start: LowRankAdapter, seqs: list[list[int]],
                cfg: OptimizerConfig, seed: int) -> LocalResult:
    """``cfg.epochs_K`` shuffled epochs of AdamW on next-token cross-entropy.

    ``start`` is not modified; the base model is never touched.
    """
    if not seqs:
        raise ValueError("local_train needs a non-empty view")
    adapter = start.copy()
    params = adapter.params()  # views onto adapter.A / adapter.B
    opt = cfg.make_optimizer()
    rng = np.random.default_rng(seed)
    losses, steps = [], 0
    for _ in range(cfg.epochs_K):
        order = rng.permutation(len(seqs))
        for s in range(0, len(order), cfg.batch_size):
            batch = [seqs[i] for i in order[s:s + cfg.batch_size]]
            tape = Tape(seed=derive_seed(seed, "dropout", steps))
            loss = lm_loss_graph(model, tape, batch, adapter, training=True, train_adapter=True)
            grads = tape.backward(loss)
            opt.step(params, grads)
            losses.append(float(loss.value))
            steps += 1
    return LocalResult(adapter, steps, losses, opt)


def comm_cost(obj) -> tuple[int, int]:
    """(parameter count, payload bytes at 4 bytes per f32 value)."""
    if isinstance(obj, LowRankAdapter):
        n = sum(v.size for v in obj.params().values())
    elif isinstance(obj, DenseDelta):
        n = sum(v.size for v in obj.deltas.values())
    else:
        raise TypeError(f"no communication cost for {type(obj).__name__}")
    return int(n), 4 * int(n)


class MessageQueue:
    """In-process upload channel; keeps every serialized message for auditing."""

    def __init__(self):
        self._lock = threading.Lock()
        self.transcript: list[tuple[int, int, bytes]] = []  # (round, sender, payload)
        self._pending: list[tuple[int, bytes]] = []

    def send(self, round_t: int, sender: int, obj) -> int:
        if isinstance(obj, DenseDelta) and obj.local_only:
            raise UploadRefused("local-only deltas cannot be uploaded")
        if getattr(obj, "role", None) not in (Role.SECURE, Role.GLOBAL):
            raise UploadRefused(f"role {getattr(obj, 'role', None)!r} is not uploadable")
        data = lora.to_bytes(obj)
        with self._lock:
            self.transcript.append((round_t, sender, data))
            self._pending.append((sender, data))
        return len(data)

    def drain(self) -> list[tuple[int, bytes]]:
        with self._lock:
            out = sorted(self._pending, key=lambda x: x[0])
            self._pending = []
        return out

    def dump(self) -> bytes:
        """All messages as length-prefixed records (for persistence and scans)."""
        parts = []
        for t, sender, data in self.transcript:
            parts.append(np.array([t, sender, len(data)], dtype="<u4").tobytes())
            parts.append(data)
        return b"".join(parts)


# ---------------------------------------------------------------- server side


def weighted_average(updates: list[dict[str, np.ndarray]], sizes) -> dict[str, np.ndarray]:
    """Size-weighted mean, summed in the given order."""
    updates, sizes = list(updates), [float(s) for s in sizes]
    if not updates or len(updates) != len(sizes):
        raise ValueError(f"{len(updates)} updates but {len(sizes)} sizes")
    if any(s <= 0 for s in sizes):
        raise ValueError("client sizes must be positive")
    total = sum(sizes)
    out = {k: np.zeros_like(v, dtype=np.float64) for k, v in updates[0].items()}
    for u, s in zip(updates, sizes):
        if set(u) != set(out):
            raise ValueError("updates cover different tensors")
        for k in out:
            out[k] += (s / total) * u[k]
    return out


def momentum_step(server: ServerState, avg: dict[str, np.ndarray]):
    """Lookahead momentum update; returns ``(new_weights, new_momentum)``."""
    w, v, m, eta = server.global_adapter.params(), server.momentum, server.m, server.eta_global
    if set(avg) != set(w) or any(avg[k].shape != w[k].shape for k in w):
        raise ValueError("average does not match the global adapter shapes")
    new_w, new_v = {}, {}
    for k in w:
        p = w[k] + m * v[k]
        new_v[k] = m * v[k] + eta * (avg[k] - p)
        new_w[k] = w[k] + new_v[k]
    return new_w, new_v


def with_params(adapter: LowRankAdapter, params: dict[str, np.ndarray], **changes) -> LowRankAdapter:
    A = {p: np.array(params[f"{p}.A"], dtype=np.float64) for p in adapter.points}
    B = {p: np.array(params[f"{p}.B"], dtype=np.float64) for p in adapter.points}
    return adapter.copy(A=A, B=B, **changes)


def _client_update(model, broadcast, client: ClientState, tokenizer, cfg, defense, seed):
    seqs = view_tokens(client.dataset, "masked", tokenizer, model.config.context_len)
    res = local_train(model, broadcast.copy(role=Role.SECURE, adapter_id=f"secure-{client.client_id}"),
                      seqs, cfg, seed)
    upload = res.adapter
    if defense.dp:
        base = broadcast.params()
        diff = {k: v - base[k] for k, v in res.adapter.params().items()}
        noisy = dp_noise(diff, defense.clip_norm, defense.sigma, derive_seed(seed, "dp"))
        upload = with_params(res.adapter, {k: base[k] + noisy[k] for k in base})
    return res, upload


def run_round(server: ServerState, clients: list[ClientState], model: TinyLM,
              cfg: OptimizerConfig, defense: DefenseConfig, seed: int,
              queue: MessageQueue | None = None, tokenizer: CharTokenizer | None = None,
              jobs: int = 1) -> tuple[ServerState, dict]:
    """One broadcast / local-train / aggregate cycle.

    Returns the new server state and a log record. Clients are processed and
    aggregated in ascending ``client_id`` order.
    """
    if server.t >= server.T:
        raise RoundError(f"round {server.t} requested but T = {server.T}")
    tokenizer = tokenizer or CharTokenizer(model.config.vocab_size)
    queue = queue or MessageQueue()
    clients = sorted(clients, key=lambda c: c.client_id)
    broadcast = server.global_adapter
    t0 = time.perf_counter()

    def work(c: ClientState):
        return _client_update(model, broadcast, c, tokenizer, cfg, defense,
                              derive_seed(seed, "client", c.client_id, "round", server.t))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(work, clients))
    else:
        results = [work(c) for c in clients]

    entries = []
    for c, (res, upload) in zip(clients, results):
        c.secure_adapter = res.adapter
        c.moments["secure"] = res.optimizer
        wire = queue.send(server.t, c.client_id, upload)
        entries.append({
            "client_id": c.client_id,
            "loss_first": res.losses[0],
            "loss_last": res.losses[-1],
            "steps": res.steps,
            "message_bytes": comm_cost(upload)[1],
            "wire_bytes": wire,
        })

    by_sender = dict(queue.drain())
    received = [lora.from_bytes(by_sender[c.client_id]).params() for c in clients]
    avg = weighted_average(received, [c.dataset.size for c in clients])
    new_w, new_v = momentum_step(server, avg)
    new_server = ServerState(with_params(server.global_adapter, new_w), new_v, server.t + 1,
                             server.m, server.eta_global, server.T)
    log = {"t": server.t, "clients": entries}
    return new_server, {**log, "wall_time_s": time.perf_counter() - t0}


def log_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)
