"""Low-rank adapters (``delta = scale * B @ A``), dense fusion and checkpoints."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _binio
from .autodiff import Node, Tape

ADAPTER_MAGIC = b"SGAD"
DELTA_MAGIC = b"SGDD"
FORMAT_VERSION = 1

DEFAULT_RANKS = (4, 8, 12, 16)
INIT_STD = 0.02


class Role(enum.IntEnum):
    SECURE = 0
    REVEALING = 1
    GLOBAL = 2
    FUSED = 3


@dataclass
class LowRankAdapter:
    A: dict[str, np.ndarray]  # point -> (r, k)
    B: dict[str, np.ndarray]  # point -> (d, r)
    rank: int
    lora_alpha: float
    dropout_p: float = 0.1
    role: Role = Role.SECURE
    adapter_id: str = ""

    def __post_init__(self):
        if set(self.A) != set(self.B):
            raise ValueError("A and B must cover the same attachment points")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        for p in self.A:
            a, b = self.A[p], self.B[p]
            if a.shape[0] != self.rank or b.shape[1] != self.rank:
                raise ValueError(f"{p}: A {a.shape} / B {b.shape} disagree with rank {self.rank}")
            if not (np.isfinite(a).all() and np.isfinite(b).all()):
                raise ValueError(f"{p}: non-finite adapter entries")

    @property
    def points(self) -> list[str]:
        return list(self.A)

    @property
    def scale(self) -> float:
        return self.lora_alpha / self.rank

    def delta(self, point: str) -> np.ndarray:
        """Effective dense update for one point, scaling included."""
        return self.scale * (self.B[point] @ self.A[point])

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for p in self.A:
            out[f"{p}.A"] = self.A[p]
            out[f"{p}.B"] = self.B[p]
        return out

    def copy(self, **changes) -> "LowRankAdapter":
        kw = dict(
            A={k: v.copy() for k, v in self.A.items()},
            B={k: v.copy() for k, v in self.B.items()},
            rank=self.rank, lora_alpha=self.lora_alpha, dropout_p=self.dropout_p,
            role=self.role, adapter_id=self.adapter_id,
        )
        kw.update(changes)
        return LowRankAdapter(**kw)

    def project(self, tape: Tape, point: str, h: Node, W: Node, training: bool,
                trainable: bool) -> Node:
        base = tape.matmul(h, W, transpose_b=True)
        if trainable:
            A = tape.input(f"{point}.A", self.A[point], trainable=True)
            B = tape.input(f"{point}.B", self.B[point], trainable=True)
        else:
            A, B = tape.const(self.A[point]), tape.const(self.B[point])
        z = tape.dropout(tape.matmul(h, A, transpose_b=True), self.dropout_p, training)
        return tape.add(base, tape.multiply(tape.matmul(z, B, transpose_b=True), self.scale))


@dataclass
class DenseDelta:
    deltas: dict[str, np.ndarray]  # point -> (d, k)
    provenance: list[tuple[str, float]] = field(default_factory=list)
    role: Role = Role.FUSED
    local_only: bool = False
    info: dict = field(default_factory=dict)

    @property
    def points(self) -> list[str]:
        return list(self.deltas)

    def delta(self, point: str) -> np.ndarray:
        return self.deltas[point]

    def project(self, tape: Tape, point: str, h: Node, W: Node, training: bool,
                trainable: bool) -> Node:
        return tape.matmul(h, tape.add(W, tape.const(self.deltas[point])), transpose_b=True)


def init_adapter(model, r: int, role: Role, seed: int, *, lora_alpha: float | None = None,
                 dropout_p: float = 0.1, allowed_ranks=DEFAULT_RANKS,
                 adapter_id: str = "") -> LowRankAdapter:
    """Gaussian ``A`` (std 0.02), zero ``B``: the initial delta is exactly zero."""
    if allowed_ranks is not None and r not in allowed_ranks:
        raise ValueError(f"rank {r} not in allowed set {tuple(allowed_ranks)}")
    rng = np.random.default_rng(seed)
    A, B = {}, {}
    for p in model.points:
        d, k = model.point_shape(p)
        if r < 1 or r > min(d, k):
            raise ValueError(f"rank {r} exceeds min(d, k) = {min(d, k)} at {p}")
        A[p] = rng.normal(0.0, INIT_STD, size=(r, k))
        B[p] = np.zeros((d, r))
    return LowRankAdapter(A, B, r, 4.0 * r if lora_alpha is None else lora_alpha,
                          dropout_p, Role(role), adapter_id)


def apply(adapter: LowRankAdapter, x, training: bool = False, seed: int = 0,
          point: str | None = None) -> np.ndarray:
    """``scale * B (A x)`` for row vectors ``x`` of shape ``(n, k)``."""
    if point is None:
        if len(adapter.A) != 1:
            raise ValueError("point is required for multi-point adapters")
        point = adapter.points[0]
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    A, B = adapter.A[point], adapter.B[point]
    if x.shape[-1] != A.shape[1]:
        raise ValueError(f"apply: input dim {x.shape[-1]} does not match k={A.shape[1]}")
    tape = Tape(seed=seed)
    z = tape.dropout(tape.matmul(tape.const(x), tape.const(A), transpose_b=True),
                     adapter.dropout_p, training)
    out = tape.multiply(tape.matmul(z, tape.const(B), transpose_b=True), adapter.scale)
    return out.value


def fuse(adapters, coeffs) -> DenseDelta:
    """Dense linear combination ``sum_i coeffs[i] * delta_i`` at every point."""
    adapters, coeffs = list(adapters), [float(c) for c in coeffs]
    if not adapters:
        raise ValueError("fuse needs at least one adapter")
    if len(adapters) != len(coeffs):
        raise ValueError(f"{len(adapters)} adapters but {len(coeffs)} coefficients")
    points = adapters[0].points
    out = {}
    for p in points:
        shapes = {a.delta(p).shape for a in adapters if p in a.points}
        if len(shapes) != 1 or any(p not in a.points for a in adapters):
            raise ValueError(f"fuse: adapters disagree at attachment point {p}")
        acc = np.zeros(shapes.pop())
        for a, c in zip(adapters, coeffs):
            acc += c * a.delta(p)
        out[p] = acc
    prov = [(getattr(a, "adapter_id", "") or f"#{i}", c) for i, (a, c) in enumerate(zip(adapters, coeffs))]
    return DenseDelta(out, prov, Role.FUSED)


# ---------------------------------------------------------------- serialization


def to_bytes(obj) -> bytes:
    w = _binio.Writer()
    if isinstance(obj, LowRankAdapter):
        w.raw(ADAPTER_MAGIC)
        w.u16(FORMAT_VERSION)
        w.u8(int(obj.role))
        w.u16(obj.rank)
        w.f32(obj.lora_alpha)
        w.f32(obj.dropout_p)
        w.text(obj.adapter_id)
        w.u32(len(obj.A))
        for p in obj.points:
            w.text(p)
            w.dims(obj.A[p].shape)
            w.array(obj.A[p])
            w.dims(obj.B[p].shape)
            w.array(obj.B[p])
    elif isinstance(obj, DenseDelta):
        w.raw(DELTA_MAGIC)
        w.u16(FORMAT_VERSION)
        w.u8(int(obj.role))
        w.u8(int(obj.local_only))
        w.text(json.dumps({"provenance": obj.provenance, "info": obj.info}, sort_keys=True))
        w.u32(len(obj.deltas))
        for p in obj.points:
            w.text(p)
            w.dims(obj.deltas[p].shape)
            w.array(obj.deltas[p])
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    return w.getvalue()


def from_bytes(data: bytes):
    magic = data[:4]
    r = _binio.Reader(data)
    if magic == ADAPTER_MAGIC:
        _binio.check_magic(r, ADAPTER_MAGIC, FORMAT_VERSION)
        role, rank = Role(r.u8()), r.u16()
        alpha, dropout = r.f32(), r.f32()
        adapter_id = r.text()
        A, B = {}, {}
        for _ in range(r.u32()):
            p = r.text()
            A[p] = r.array(r.dims())
            B[p] = r.array(r.dims())
        r.expect_end()
        return LowRankAdapter(A, B, rank, alpha, dropout, role, adapter_id)
    if magic == DELTA_MAGIC:
        _binio.check_magic(r, DELTA_MAGIC, FORMAT_VERSION)
        role, local_only = Role(r.u8()), bool(r.u8())
        meta = json.loads(r.text())
        deltas = {}
        for _ in range(r.u32()):
            p = r.text()
            deltas[p] = r.array(r.dims())
        r.expect_end()
        prov = [(str(a), float(c)) for a, c in meta["provenance"]]
        return DenseDelta(deltas, prov, role, local_only, meta.get("info", {}))
    raise _binio.CheckpointError("bad magic")


def save(obj, path) -> None:
    Path(path).write_bytes(to_bytes(obj))


def load(path):
    return from_bytes(Path(path).read_bytes())


def round_trip(adapter: LowRankAdapter) -> LowRankAdapter:
    """What a receiver sees after the adapter crosses the f32 wire format."""
    return from_bytes(to_bytes(adapter))
