"""A tiny single-head causal transformer used as the frozen base model.

Pre-LN blocks: ``x += attn(ln1(x)); x += ffn(ln2(x))`` with a final layer-norm
and an untied output head.  Adapters attach to the query and value projections
of every block.  Weights are stored as ``(out, in)`` matrices, so a projection
is ``h @ W.T``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _binio
from .autodiff import Node, Tape
from .optim import AdamW
from .tokenizer import EOT, FIRST_KEY_SLOT, N_RESERVED, UNKNOWN_KEY

MODEL_MAGIC = b"SGLM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 160
    embed_dim: int = 64
    n_layers: int = 2
    context_len: int = 128
    n_heads: int = 1

    def __post_init__(self):
        errs = self.problems()
        if errs:
            raise ValueError("; ".join(errs))

    def problems(self) -> list[str]:
        errs = []
        for name in ("vocab_size", "embed_dim", "n_layers", "context_len", "n_heads"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                errs.append(f"model.{name} must be a positive integer")
        if not errs:
            if self.n_heads != 1:
                errs.append("model.n_heads must be 1")
            if self.embed_dim % self.n_heads:
                errs.append("model.embed_dim must be divisible by n_heads")
            if self.vocab_size <= N_RESERVED:
                errs.append(f"model.vocab_size must exceed {N_RESERVED} reserved tokens")
        return errs


def attachment_points(config: ModelConfig) -> list[str]:
    return [f"blocks.{l}.attn.{p}" for l in range(config.n_layers) for p in ("q", "v")]


def _positional(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / (10000.0 ** (i / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def init_weights(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, V, f = config.embed_dim, config.vocab_size, 4 * config.embed_dim

    def normal(*shape, std=0.02):
        return rng.normal(0.0, std, size=shape)

    w = {"tok_emb": normal(V, d)}
    for l in range(config.n_layers):
        p = f"blocks.{l}."
        w[p + "ln1.g"] = np.ones(d)
        w[p + "ln1.b"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            w[p + f"attn.{name}"] = normal(d, d, std=1.0 / math.sqrt(d))
        w[p + "ln2.g"] = np.ones(d)
        w[p + "ln2.b"] = np.zeros(d)
        w[p + "ffn.up"] = normal(f, d, std=1.0 / math.sqrt(d))
        w[p + "ffn.up_b"] = np.zeros(f)
        w[p + "ffn.down"] = normal(d, f, std=1.0 / math.sqrt(f))
        w[p + "ffn.down_b"] = np.zeros(d)
    w["ln_f.g"] = np.ones(d)
    w["ln_f.b"] = np.zeros(d)
    w["head"] = normal(V, d, std=1.0 / math.sqrt(d))
    w["head_b"] = np.zeros(V)
    return w


class TinyLM:
    """Frozen base model. Weights are read-only once constructed."""

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        if not weights:
            raise ValueError("weights required")
        self.config = config
        self.weights = {}
        for k, v in weights.items():
            arr = np.array(v, dtype=np.float64)
            arr.setflags(write=False)
            self.weights[k] = arr
        self.points = attachment_points(config)
        self._pe = _positional(config.context_len, config.embed_dim)

    def point_shape(self, point: str) -> tuple[int, int]:
        return self.weights[point].shape

    # -- graph construction

    def graph(self, tape: Tape, tokens: np.ndarray, adapter=None, training: bool = False,
              train_base: bool = False, train_adapter: bool = False,
              embed_rows: dict[int, np.ndarray] | None = None) -> tuple[Node, Node]:
        """Build the forward graph for a ``(B, T)`` id array.

        Returns ``(logits, final_hidden)``.  ``adapter`` is anything with a
        ``project(tape, point, h, W, training, trainable)`` method, or None.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be 2-D (batch, time), got {tokens.shape}")
        B, T = tokens.shape
        cfg = self.config
        if T > cfg.context_len:
            raise ValueError(f"sequence length {T} exceeds context_len {cfg.context_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of vocabulary [0, {cfg.vocab_size})")

        if train_base:
            W = {k: tape.input(k, v, trainable=True) for k, v in self.weights.items()}
        else:
            W = {k: tape.const(v) for k, v in self.weights.items()}
        if embed_rows:
            table = self.weights["tok_emb"].copy()
            for i, row in embed_rows.items():
                table[i] = row
            W["tok_emb"] = tape.const(table)

        x = tape.embedding(W["tok_emb"], tokens)
        x = tape.add(x, tape.const(self._pe[:T]))
        causal = np.tril(np.ones((T, T), dtype=bool))
        inv = 1.0 / math.sqrt(cfg.embed_dim)

        def proj(h, name):
            if adapter is not None and name in self.points:
                return adapter.project(tape, name, h, W[name], training, train_adapter)
            return tape.matmul(h, W[name], transpose_b=True)

        for l in range(cfg.n_layers):
            p = f"blocks.{l}."
            h = tape.layer_norm(x, W[p + "ln1.g"], W[p + "ln1.b"])
            q = proj(h, p + "attn.q")
            k = proj(h, p + "attn.k")
            v = proj(h, p + "attn.v")
            att = tape.softmax(tape.multiply(tape.matmul(q, k, transpose_b=True), inv), mask=causal)
            x = tape.add(x, proj(tape.matmul(att, v), p + "attn.o"))
            h = tape.layer_norm(x, W[p + "ln2.g"], W[p + "ln2.b"])
            u = tape.gelu(tape.add(proj(h, p + "ffn.up"), W[p + "ffn.up_b"]))
            x = tape.add(x, tape.add(proj(u, p + "ffn.down"), W[p + "ffn.down_b"]))
        hidden = tape.layer_norm(x, W["ln_f.g"], W["ln_f.b"])
        logits = tape.add(tape.matmul(hidden, W["head"], transpose_b=True), W["head_b"])
        return logits, hidden


# ---------------------------------------------------------------- batching


def pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with EOT; returns ``(ids, lengths)``."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max()) if len(seqs) else 0
    ids = np.full((len(seqs), T), EOT, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def lm_targets(seqs: list[list[int]]):
    """Inputs, targets and position weights for next-token prediction."""
    ids, lengths = pad_batch(seqs)
    inputs = ids[:, :-1]
    targets = ids[:, 1:]
    weights = (np.arange(inputs.shape[1])[None, :] < (lengths[:, None] - 1)).astype(np.float64)
    return inputs, targets, weights


def lm_loss_graph(model: TinyLM, tape: Tape, seqs, adapter=None, training=False,
                  train_base=False, train_adapter=False) -> Node:
    inputs, targets, weights = lm_targets(seqs)
    logits, _ = model.graph(tape, inputs, adapter, training, train_base, train_adapter)
    return tape.cross_entropy(logits, targets, weights)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sequence_log_probs(model: TinyLM, adapter, seqs: list[list[int]],
                       batch_size: int = 64) -> list[np.ndarray]:
    """Per-sequence log P(token_i | prefix) for positions 1..n-1."""
    out: list[np.ndarray | None] = [None] * len(seqs)
    order = sorted(range(len(seqs)), key=lambda i: len(seqs[i]))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        chunk = [seqs[i] for i in idx]
        inputs, targets, _ = lm_targets(chunk)
        logits, _ = model.graph(Tape(), inputs, adapter)
        logp = _log_softmax(logits.value)
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        for row, i in enumerate(idx):
            out[i] = picked[row, : len(seqs[i]) - 1]
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------- public operations


def forward_logits(model: TinyLM, adapter, tokens) -> np.ndarray:
    tokens = list(tokens)
    if not tokens:
        return np.zeros((0, model.config.vocab_size))
    logits, _ = model.graph(Tape(), np.asarray([tokens]), adapter)
    return logits.value[0]


def perplexity_from_log_probs(log_probs) -> float:
    lp = np.concatenate([np.ravel(x) for x in log_probs]) if isinstance(log_probs, list) \
        else np.ravel(np.asarray(log_probs, dtype=np.float64))
    if lp.size < 1:
        raise ValueError("perplexity needs at least one scored position")
    return float(np.exp(-lp.mean()))


def perplexity(model: TinyLM, adapter, tokens) -> float:
    """PPL of one sequence (or a list of sequences, pooled over all scored tokens).

    The first token of each sequence is the conditioning BOS and is not scored.
    """
    seqs = [list(tokens)] if tokens and isinstance(next(iter(tokens)), (int, np.integer)) \
        else [list(s) for s in tokens]
    if sum(max(len(s) - 1, 0) for s in seqs) < 1:
        raise ValueError("perplexity needs at least one scored position")
    return perplexity_from_log_probs(sequence_log_probs(model, adapter, seqs))


def hidden_state_at(model: TinyLM, tokens, position: int,
                    embed_rows: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Final-layer hidden state of the frozen base (no adapter) at ``position``."""
    tokens = list(tokens)
    if not 0 <= position < len(tokens):
        raise IndexError(f"position {position} out of range for {len(tokens)} tokens")
    # causal: later tokens cannot change this position, so only the prefix is run
    _, hidden = model.graph(Tape(), np.asarray([tokens[: position + 1]]), None,
                            embed_rows=embed_rows)
    return hidden.value[0, position].copy()


def banned_for_generation(vocab_size: int) -> np.ndarray:
    banned = np.zeros(vocab_size, dtype=bool)
    banned[UNKNOWN_KEY] = True
    banned[FIRST_KEY_SLOT:] = True
    return banned


def sample_batch(model: TinyLM, adapter, prompts: list[list[int]], temperature: float,
                 max_new: int, seed: int, greedy: bool = False) -> list[list[int]]:
    """Sample continuations for several prompts at once; stops each at EOT.

    Key-slot and unknown-key ids are never generated.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    rng = np.random.default_rng(seed)
    ctx = model.config.context_len
    banned = banned_for_generation(model.config.vocab_size)
    seqs = [list(p) for p in prompts]
    outs: list[list[int]] = [[] for _ in prompts]
    alive = [True] * len(prompts)
    for _ in range(max_new):
        live = [i for i in range(len(seqs)) if alive[i]]
        if not live:
            break
        windows = [seqs[i][-ctx:] if seqs[i] else [EOT] for i in live]
        ids, lengths = pad_batch(windows)
        logits, _ = model.graph(Tape(), ids, adapter)
        last = logits.value[np.arange(len(live)), lengths - 1]
        last = np.where(banned, -np.inf, last)
        if greedy:
            picks = last.argmax(axis=-1)
        else:
            z = last / temperature
            p = np.exp(z - z.max(axis=-1, keepdims=True))
            p /= p.sum(axis=-1, keepdims=True)
            u = rng.random(len(live))
            picks = np.minimum((p.cumsum(axis=-1) < u[:, None]).sum(axis=-1), p.shape[-1] - 1)
        for i, t in zip(live, picks):
            t = int(t)
            if t == EOT:
                alive[i] = False
                continue
            seqs[i].append(t)
            outs[i].append(t)
    return outs


def sample(model: TinyLM, adapter, prompt, temperature: float, max_new: int, seed: int,
           greedy: bool = False) -> list[int]:
    return sample_batch(model, adapter, [list(prompt)], temperature, max_new, seed, greedy)[0]


def pretrain_base(config: ModelConfig, corpus: list[list[int]], steps: int, seed: int,
                  lr: float = 3e-3, batch_size: int = 16) -> TinyLM:
    """Train all weights on ``corpus`` then freeze.

    Weights are rounded to float32 on return so checkpoints round-trip exactly.
    """
    corpus = [list(s) for s in corpus if len(s) >= 2]
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    weights = init_weights(config, seed)
    opt = AdamW(lr=lr, weight_decay=0.01)
    for _ in range(steps):
        idx = rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)
        batch = [corpus[i][: config.context_len + 1] for i in idx]
        model = TinyLM(config, weights)
        tape = Tape()
        loss = lm_loss_graph(model, tape, batch, train_base=True)
        opt.step(weights, tape.backward(loss))
    return TinyLM(config, {k: _binio.f32_round(v) for k, v in weights.items()})


def mean_loss(model: TinyLM, adapter, seqs: list[list[int]]) -> float:
    """Token-averaged next-token cross-entropy (nats)."""
    lps = sequence_log_probs(model, adapter, seqs)
    return float(-np.concatenate(lps).mean())


# ---------------------------------------------------------------- checkpoint


def save_model(model: TinyLM, path) -> None:
    w = _binio.Writer()
    w.raw(MODEL_MAGIC)
    w.u16(MODEL_VERSION)
    w.text(json.dumps(asdict(model.config), sort_keys=True))
    names = sorted(model.weights)
    w.u32(len(names))
    for n in names:
        w.text(n)
        w.dims(model.weights[n].shape)
    for n in names:
        w.array(model.weights[n])
    Path(path).write_bytes(w.getvalue())


def load_model(path) -> TinyLM:
    r = _binio.Reader(Path(path).read_bytes())
    _binio.check_magic(r, MODEL_MAGIC, MODEL_VERSION)
    config = ModelConfig(**json.loads(r.text()))
    header = [(r.text(), r.dims()) for _ in range(r.u32())]
    weights = {name: r.array(shape) for name, shape in header}
    r.expect_end()
    return TinyLM(config, weights)

