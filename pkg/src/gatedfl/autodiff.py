"""Small reverse-mode autodiff over dense float64 numpy arrays.

A :class:`Tape` records operations as they are called (define-by-run).  The
recorded graph can be replayed with new input values, which is what
:func:`check_gradients` uses for central differences.

Supported ops: matmul, add, multiply, embedding lookup, softmax, layer-norm,
GELU, GLU, dropout and cross-entropy.  Nothing else is differentiable here on
purpose, so every op has a finite-difference test.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "ShapeError",
    "FlopCounter",
    "count_flops",
    "forward",
    "backward",
    "check_gradients",
]


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------- FLOP counting

@dataclass
class FlopCounter:
    """Accumulates matmul FLOPs (2 per multiply-accumulate)."""

    flops: int = 0
    matmuls: int = 0

    def add(self, macs: int) -> None:
        self.flops += 2 * macs
        self.matmuls += 1


_counters: list[FlopCounter] = []
_counter_lock = threading.Lock()


@contextmanager
def count_flops():
    counter = FlopCounter()
    with _counter_lock:
        _counters.append(counter)
    try:
        yield counter
    finally:
        with _counter_lock:
            _counters.remove(counter)


def _record_matmul(a_shape, b_shape, out_shape) -> None:
    if not _counters:
        return
    # MACs = (#output elements) * (contracted dim)
    macs = int(np.prod(out_shape)) * int(a_shape[-1])
    with _counter_lock:
        for c in _counters:
            c.add(macs)


def _matmul(a, b):
    out = np.matmul(a, b)
    _record_matmul(a.shape, b.shape, out.shape)
    return out


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` (leading dims only)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def _T(x):
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------- op kernels
# Each kernel: fwd(vals, attrs, rng) -> (out, cache); bwd(g, vals, out, cache, attrs) -> grads


def _matmul_fwd(vals, attrs, rng):
    a, b = vals
    tb = attrs.get("transpose_b", False)
    k_b = b.shape[-1] if tb else b.shape[-2] if b.ndim >= 2 else None
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != k_b:
        raise ShapeError(
            f"matmul: incompatible shapes {a.shape} @ {b.shape}{'^T' if tb else ''}"
        )
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    return _matmul(a, _T(b) if tb else b), None


def _matmul_bwd(g, vals, out, cache, attrs, need):
    a, b = vals
    tb = attrs.get("transpose_b", False)
    bm = _T(b) if tb else b
    ga = gb = None
    if need[0]:
        ga = _matmul(g, _T(bm))
    if need[1]:
        gbm = _matmul(_T(a), g)
        gbm = _sum_to(gbm, bm.shape)
        gb = _T(gbm) if tb else gbm
    return ga, gb


def _add_fwd(vals, attrs, rng):
    a, b = vals
    if a.shape != b.shape and a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible")
    return a + b, None


def _add_bwd(g, vals, out, cache, attrs, need):
    a, b = vals
    return (g if need[0] else None), (_sum_to(g, b.shape) if need[1] else None)


def _mul_fwd(vals, attrs, rng):
    if len(vals) == 1:
        return vals[0] * attrs["scalar"], None
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} differ")
    return a * b, None


def _mul_bwd(g, vals, out, cache, attrs, need):
    if len(vals) == 1:
        return (g * attrs["scalar"],)
    a, b = vals
    return (g * b if need[0] else None), (g * a if need[1] else None)


def _embed_fwd(vals, attrs, rng):
    (table,) = vals
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {table.shape}")
    return table[ids], None


def _embed_bwd(g, vals, out, cache, attrs, need):
    (table,) = vals
    gt = np.zeros_like(table)
    np.add.at(gt, attrs["ids"].reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


def _softmax_fwd(vals, attrs, rng):
    (x,) = vals
    mask = attrs.get("mask")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, vals, p, cache, attrs, need):
    return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def _ln_fwd(vals, attrs, rng):
    x, gain, bias = vals
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + attrs["eps"])
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def _ln_bwd(g, vals, out, cache, attrs, need):
    x, gain, bias = vals
    xhat, rstd = cache
    n = x.shape[-1]
    gx = ggain = gbias = None
    if need[0]:
        gxhat = g * gain
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n
        )
    if need[1]:
        ggain = (g * xhat).reshape(-1, n).sum(axis=0)
    if need[2]:
        gbias = g.reshape(-1, n).sum(axis=0)
    return gx, ggain, gbias


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_fwd(vals, attrs, rng):
    (x,) = vals
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * (x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(g, vals, out, t, attrs, need):
    (x,) = vals
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _glu_fwd(vals, attrs, rng):
    (x,) = vals
    if x.shape[-1] % 2:
        raise ShapeError(f"glu: last dim must be even, got {x.shape}")
    h = x.shape[-1] // 2
    a, b = x[..., :h], x[..., h:]
    s = _sigmoid(b)
    return a * s, s


def _glu_bwd(g, vals, out, s, attrs, need):
    (x,) = vals
    h = x.shape[-1] // 2
    a = x[..., :h]
    return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)


def _dropout_fwd(vals, attrs, rng):
    (x,) = vals
    return x * attrs["mask"], None


def _dropout_bwd(g, vals, out, cache, attrs, need):
    return (g * attrs["mask"],)


def _ce_fwd(vals, attrs, rng):
    (logits,) = vals
    targets = attrs["targets"]
    weights = attrs["weights"]
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    z = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    denom = weights.sum()
    loss = -(picked * weights).sum() / denom
    return np.asarray(loss), (np.exp(logp), denom)


def _ce_bwd(g, vals, out, cache, attrs, need):
    p, denom = cache
    grad = p.copy()
    np.put_along_axis(
        grad,
        attrs["targets"][..., None],
        np.take_along_axis(grad, attrs["targets"][..., None], axis=-1) - 1.0,
        axis=-1,
    )
    grad *= (attrs["weights"] / denom)[..., None]
    return (grad * g,)


_KERNELS = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "multiply": (_mul_fwd, _mul_bwd),
    "embedding": (_embed_fwd, _embed_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "layer_norm": (_ln_fwd, _ln_bwd),
    "gelu": (_gelu_fwd, _gelu_bwd),
    "glu": (_glu_fwd, _glu_bwd),
    "dropout": (_dropout_fwd, _dropout_bwd),
    "cross_entropy": (_ce_fwd, _ce_bwd),
}

OPS = tuple(_KERNELS)


# ---------------------------------------------------------------- tape


@dataclass(eq=False)
class Node:
    id: int
    op: str  # "input" or a kernel name
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    cache: object = None
    needs_grad: bool = False
    name: str | None = None

    @property
    def shape(self):
        return self.value.shape


@dataclass(eq=False)
class Tape:
    """Single-owner record of a computation.

    All randomness (dropout masks) comes from ``seed``; masks are stored on the
    tape so :meth:`replay` is exact.
    """

    seed: int = 0
    nodes: list[Node] = field(default_factory=list)
    inputs: dict[str, int] = field(default_factory=dict)
    outputs: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    # -- leaves

    def input(self, name: str, value, trainable: bool = False) -> Node:
        if name in self.inputs:
            raise ValueError(f"input {name!r} already bound on this tape")
        arr = np.asarray(value, dtype=np.float64)
        node = self._push("input", (), {}, arr, None, trainable, name)
        self.inputs[name] = node.id
        return node

    def const(self, value) -> Node:
        return self._push("input", (), {}, np.asarray(value, dtype=np.float64), None, False)

    def mark_output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node.id
        return node

    # -- ops

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        return self._apply("matmul", (a, b), {"transpose_b": transpose_b})

    def add(self, a: Node, b: Node) -> Node:
        return self._apply("add", (a, b), {})

    def multiply(self, a: Node, b: Node | float) -> Node:
        if isinstance(b, Node):
            return self._apply("multiply", (a, b), {})
        return self._apply("multiply", (a,), {"scalar": float(b)})

    def embedding(self, table: Node, ids) -> Node:
        return self._apply("embedding", (table,), {"ids": np.asarray(ids, dtype=np.int64)})

    def softmax(self, x: Node, mask=None) -> Node:
        attrs = {} if mask is None else {"mask": np.asarray(mask, dtype=bool)}
        return self._apply("softmax", (x,), attrs)

    def layer_norm(self, x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
        return self._apply("layer_norm", (x, gain, bias), {"eps": eps})

    def gelu(self, x: Node) -> Node:
        return self._apply("gelu", (x,), {})

    def glu(self, x: Node) -> Node:
        return self._apply("glu", (x,), {})

    def dropout(self, x: Node, p: float, training: bool) -> Node:
        if not training or p == 0.0:
            return x
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout p must be in [0, 1), got {p}")
        keep = self.rng.random(x.shape) >= p
        mask = keep / (1.0 - p)
        return self._apply("dropout", (x,), {"mask": mask})

    def cross_entropy(self, logits: Node, targets, weights=None) -> Node:
        targets = np.asarray(targets, dtype=np.int64)
        if weights is None:
            weights = np.ones(targets.shape)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.sum() <= 0:
            raise ValueError("cross_entropy: no scored positions")
        return self._apply("cross_entropy", (logits,), {"targets": targets, "weights": weights})

    # -- machinery

    def _push(self, op, inputs, attrs, value, cache, needs_grad, name=None) -> Node:
        node = Node(len(self.nodes), op, inputs, attrs, value, cache, needs_grad, name)
        self.nodes.append(node)
        return node

    def _apply(self, op: str, args: tuple[Node, ...], attrs: dict) -> Node:
        fwd, _ = _KERNELS[op]
        out, cache = fwd([a.value for a in args], attrs, self.rng)
        needs = any(a.needs_grad for a in args)
        return self._push(op, tuple(a.id for a in args), attrs, out, cache, needs)

    def replay(self, values: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Recompute every node with rebound inputs; returns the marked outputs."""
        unknown = set(values) - set(self.inputs)
        if unknown:
            raise KeyError(f"unknown inputs: {sorted(unknown)}")
        for name, arr in values.items():
            node = self.nodes[self.inputs[name]]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != node.value.shape:
                raise ShapeError(f"input {name!r}: expected {node.value.shape}, got {arr.shape}")
            node.value = arr
        for node in self.nodes:
            if node.op == "input":
                continue
            fwd, _ = _KERNELS[node.op]
            node.value, node.cache = fwd(
                [self.nodes[i].value for i in node.inputs], node.attrs, self.rng
            )
        return {k: self.nodes[i].value for k, i in self.outputs.items()}

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        if loss.value.size != 1 or loss.value.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones(())}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.pop(node.id, None)
            if g is None or node.op == "input":
                if g is not None:
                    grads[node.id] = g
                continue
            ins = [self.nodes[i] for i in node.inputs]
            need = [x.needs_grad for x in ins]
            _, bwd = _KERNELS[node.op]
            in_grads = bwd(g, [x.value for x in ins], node.value, node.cache, node.attrs, need)
            for x, gx, nd in zip(ins, in_grads, need):
                if not nd or gx is None:
                    continue
                if x.id in grads:
                    grads[x.id] = grads[x.id] + gx
                else:
                    grads[x.id] = gx
        out = {}
        for name, i in self.inputs.items():
            node = self.nodes[i]
            if node.needs_grad:
                out[name] = grads.get(i, np.zeros_like(node.value))
        return out


def forward(tape: Tape, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return tape.replay(inputs)


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    return tape.backward(loss)


def check_gradients(tape: Tape, inputs: dict[str, np.ndarray] | None = None,
                    eps: float = 1e-5, loss: str = "loss") -> float:
    """Worst element-wise relative error of backward() against central differences.

    ``loss`` names the scalar output to differentiate.  Relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-12)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    values = {k: tape.nodes[i].value.copy() for k, i in tape.inputs.items()}
    if inputs:
        values.update({k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()})
    tape.replay(values)
    loss_node = tape.nodes[tape.outputs[loss]]
    analytic = tape.backward(loss_node)

    worst = 0.0
    for name, ga in analytic.items():
        base = values[name]
        flat = base.reshape(-1)
        ga = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(tape.replay(values)[loss])
            flat[j] = orig - eps
            fm = float(tape.replay(values)[loss])
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            denom = max(abs(ga[j]), abs(num), 1e-12)
            worst = max(worst, abs(ga[j] - num) / denom)
    tape.replay(values)
    return worst
