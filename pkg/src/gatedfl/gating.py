"""Access keys, the routing MLP and two-pass (route, then generate) inference.

A keyed prompt looks like ``[SPECIAL_TOKEN=ALPHA] body``.  The organisation-local
tokenizer turns a registered key into one atomic vocabulary slot placed at
position 0; anything else (unregistered, malformed, empty or absent key)
becomes the single unknown-key marker.  The router reads the frozen base
model's final hidden state at position 0, so with causal attention the
decision depends on the key token alone.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _binio
from .autodiff import Tape
from .optim import AdamW
from .seeding import derive_seed
from .tinylm import TinyLM, hidden_state_at, sample
from .tokenizer import EOT, UNKNOWN_KEY, CharTokenizer

KEY_SCALE = 0.02
SECURE_INDEX = 0
UNKNOWN_KEY_ID = "\x00unknown"
_PREFIX = re.compile(r"^\[SPECIAL_TOKEN=([^\]]*)\]\s?")

GATING_MAGIC = b"SGGT"
GATING_VERSION = 1

CATEGORIES = ("valid", "malformed", "empty", "no_key")

PROMPT_BODIES = [
    "Tell me about the latest case.",
    "Who filed the complaint last week?",
    "Summarize the review.",
    "Where does the applicant live?",
    "Write a short note about the order.",
    "What happened at the hearing?",
    "List the people involved.",
    "Describe the product feedback.",
    "When was the decision made?",
    "Which organisation was named?",
    "Give me the customer record.",
    "Continue the report.",
]


class RegistryError(ValueError):
    pass


def key_embedding(secret: bytes, key_id: str, dim: int) -> np.ndarray:
    """``0.02 * (2u - 1)`` with ``u`` drawn from a PRNG seeded by HMAC-SHA256(secret, key_id)."""
    digest = hmac.new(secret, key_id.encode("utf-8"), hashlib.sha256).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return KEY_SCALE * (2.0 * rng.random(dim) - 1.0)


def parse_prompt(text: str) -> tuple[str | None, str]:
    """Split a leading ``[SPECIAL_TOKEN=...]`` prefix from the prompt body."""
    m = _PREFIX.match(text)
    if m is None:
        return None, text
    return m.group(1), text[m.end():]


def format_prompt(key: str | None, body: str) -> str:
    return body if key is None else f"[SPECIAL_TOKEN={key}] {body}"


@dataclass
class AccessKey:
    key_id: str
    token_id: int
    adapter_index: int
    embedding: np.ndarray
    salt: str
    secret_hash: str
    generation: int = 0

    def __repr__(self):  # keep embeddings and hashes out of logs
        return f"AccessKey({self.key_id!r}, token={self.token_id}, adapter={self.adapter_index})"


class KeyRegistry:
    """Organisation-local key table plus the local tokenizer extension."""

    def __init__(self, dim: int, vocab_size: int = 160, registry_secret: bytes = b"",
                 seed: int = 0):
        self.dim = dim
        self.tokenizer = CharTokenizer(vocab_size)
        self.seed = seed
        self.keys: dict[str, AccessKey] = {}
        self.unknown_embedding = key_embedding(registry_secret, UNKNOWN_KEY_ID, dim)

    def _free_slot(self) -> int:
        used = {k.token_id for k in self.keys.values()}
        for slot in self.tokenizer.key_slots:
            if slot not in used:
                return slot
        raise RegistryError("no free key slots in the local vocabulary")

    def register_key(self, key_id: str, secret: bytes | str, adapter_index: int,
                     generation: int = 0) -> AccessKey:
        if key_id in self.keys:
            raise RegistryError(f"key {key_id!r} already registered")
        if not key_id or "]" in key_id:
            raise RegistryError(f"invalid key id {key_id!r}")
        if adapter_index == SECURE_INDEX:
            raise RegistryError("keys cannot route to the secure fallback slot")
        secret = secret.encode("utf-8") if isinstance(secret, str) else bytes(secret)
        salt = hashlib.sha256(repr((self.seed, key_id, generation)).encode()).hexdigest()[:16]
        key = AccessKey(key_id, self._free_slot(), int(adapter_index),
                        key_embedding(secret, key_id, self.dim), salt,
                        hashlib.sha256(salt.encode() + secret).hexdigest(), generation)
        self.keys[key_id] = key
        return key

    def rotate_key(self, key_id: str, new_secret: bytes | str) -> AccessKey:
        """Replace a key's secret; it keeps its slot and adapter, its generation advances."""
        old = self.keys.pop(key_id, None)
        if old is None:
            raise RegistryError(f"key {key_id!r} is not registered")
        new = self.register_key(key_id, new_secret, old.adapter_index, old.generation + 1)
        new.token_id = old.token_id
        return new

    def verify(self, key_id: str, secret: bytes | str) -> bool:
        key = self.keys.get(key_id)
        if key is None:
            return False
        secret = secret.encode("utf-8") if isinstance(secret, str) else bytes(secret)
        digest = hashlib.sha256(key.salt.encode() + secret).hexdigest()
        return hmac.compare_digest(digest, key.secret_hash)

    def embed_rows(self) -> dict[int, np.ndarray]:
        rows = {UNKNOWN_KEY: self.unknown_embedding}
        rows.update({k.token_id: k.embedding for k in self.keys.values()})
        return rows

    @property
    def n_outputs(self) -> int:
        return 1 + max((k.adapter_index for k in self.keys.values()), default=0)

    def encode_prompt(self, text: str) -> tuple[list[int], list[int]]:
        """Local tokenization: ``(gating_tokens, clean_tokens)``.

        ``gating_tokens`` starts with the key slot (or the unknown-key marker);
        ``clean_tokens`` is the key-free prompt used for generation.
        """
        key, body = parse_prompt(text)
        entry = self.keys.get(key) if key is not None else None
        first = entry.token_id if entry is not None else UNKNOWN_KEY
        body_ids = self.tokenizer.encode(body)
        return [first, *body_ids], [EOT, *body_ids]

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "seed": self.seed,
            "unknown_token": UNKNOWN_KEY,
            "keys": {k: {"adapter_index": v.adapter_index, "token_id": v.token_id,
                         "salt": v.salt, "secret_hash": v.secret_hash,
                         "generation": v.generation}
                     for k, v in sorted(self.keys.items())},
        }

    def local_vocab_json(self) -> dict:
        return {k: v.token_id for k, v in sorted(self.keys.items())}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path, secrets, vocab_size: int = 160,
             registry_secret: bytes = b"") -> "KeyRegistry":
        """Rebuild from the registry file; each secret is checked against its hash.

        ``secrets`` maps key id to secret, or is a callable ``(key_id, generation) -> secret``.
        """
        data = json.loads(Path(path).read_text())
        reg = cls(data["dim"], vocab_size, registry_secret, data["seed"])
        for key_id, entry in sorted(data["keys"].items(), key=lambda kv: kv[1]["token_id"]):
            gen = entry.get("generation", 0)
            if callable(secrets):
                secret = secrets(key_id, gen)
            elif key_id in secrets:
                secret = secrets[key_id]
            else:
                raise RegistryError(f"no secret supplied for key {key_id!r}")
            key = reg.register_key(key_id, secret, entry["adapter_index"], gen)
            if key.secret_hash != entry["secret_hash"]:
                raise RegistryError(f"secret for key {key_id!r} does not match the registry")
            key.token_id = entry["token_id"]
        return reg


# ---------------------------------------------------------------- routing data


@dataclass(frozen=True)
class RoutingExample:
    prompt: str
    label: int
    category: str
    intended_key: str | None = None


def _corrupt(key: str, rng: np.random.Generator, alphabet: str) -> str:
    kind = int(rng.integers(5))
    i = int(rng.integers(len(key)))
    if kind == 0 and len(key) > 1:  # truncation
        return key[: int(rng.integers(1, len(key)))]
    if kind == 1 and len(key) > 1:  # deletion
        return key[:i] + key[i + 1:]
    if kind == 2:  # substitution
        c = alphabet[int(rng.integers(len(alphabet)))]
        return key[:i] + c + key[i + 1:]
    if kind == 3:  # insertion
        c = alphabet[int(rng.integers(len(alphabet)))]
        return key[:i] + c + key[i:]
    return key + "_CORRUPT"


def synth_routing_data(registry: KeyRegistry, n_per_class: int, seed: int,
                       bodies=PROMPT_BODIES) -> list[RoutingExample]:
    """``n_per_class`` prompts for each of valid / malformed / empty / no-key.

    Valid prompts cycle through the registered keys and carry that key's
    adapter index; every other category is labelled with the secure index.
    """
    if not registry.keys:
        raise RegistryError("registry has no keys")
    rng = np.random.default_rng(seed)
    keys = sorted(registry.keys.values(), key=lambda k: k.token_id)
    alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_"
    body = lambda: bodies[int(rng.integers(len(bodies)))]  # noqa: E731
    out = []
    for i in range(n_per_class):
        k = keys[i % len(keys)]
        out.append(RoutingExample(format_prompt(k.key_id, body()), k.adapter_index, "valid", k.key_id))
    for i in range(n_per_class):
        k = keys[i % len(keys)]
        bad = _corrupt(k.key_id, rng, alphabet)
        while bad in registry.keys or not bad:
            bad = _corrupt(k.key_id, rng, alphabet)
        out.append(RoutingExample(format_prompt(bad, body()), SECURE_INDEX, "malformed"))
    for _ in range(n_per_class):
        out.append(RoutingExample(format_prompt("", body()), SECURE_INDEX, "empty"))
    for _ in range(n_per_class):
        out.append(RoutingExample(body(), SECURE_INDEX, "no_key"))
    return out


# ---------------------------------------------------------------- the MLP


@dataclass
class GatingMLP:
    """Linear+GLU -> LN -> dropout -> Linear+GELU -> LN -> dropout -> head.

    Inputs are standardized with a frozen per-feature mean/std.
    """

    params: dict[str, np.ndarray]
    n_out: int
    hidden: int = 128
    dropout_p: float = 0.1
    mu: np.ndarray | None = None
    sd: np.ndarray | None = None

    @classmethod
    def init(cls, dim: int, n_out: int, hidden: int = 128, dropout_p: float = 0.1,
             seed: int = 0) -> "GatingMLP":
        if n_out < 2:
            raise ValueError("the router needs at least two outputs")
        rng = np.random.default_rng(seed)

        def lin(o, i):
            return rng.normal(0.0, 1.0 / np.sqrt(i), size=(o, i))

        p = {
            "l1.W": lin(2 * hidden, dim), "l1.b": np.zeros(2 * hidden),
            "ln1.g": np.ones(hidden), "ln1.b": np.zeros(hidden),
            "l2.W": lin(hidden, hidden), "l2.b": np.zeros(hidden),
            "ln2.g": np.ones(hidden), "ln2.b": np.zeros(hidden),
            "head.W": lin(n_out, hidden) * 0.1, "head.b": np.zeros(n_out),
        }
        return cls(p, n_out, hidden, dropout_p, np.zeros(dim), np.ones(dim))

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mu) / self.sd

    def graph(self, tape: Tape, x: np.ndarray, training: bool = False, trainable: bool = False):
        P = {k: tape.input(k, v, trainable=True) if trainable else tape.const(v)
             for k, v in self.params.items()}
        h = tape.add(tape.matmul(tape.const(self.standardize(x)), P["l1.W"], transpose_b=True),
                     P["l1.b"])
        h = tape.dropout(tape.layer_norm(tape.glu(h), P["ln1.g"], P["ln1.b"]),
                         self.dropout_p, training)
        h = tape.gelu(tape.add(tape.matmul(h, P["l2.W"], transpose_b=True), P["l2.b"]))
        h = tape.dropout(tape.layer_norm(h, P["ln2.g"], P["ln2.b"]), self.dropout_p, training)
        return tape.add(tape.matmul(h, P["head.W"], transpose_b=True), P["head.b"])

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.graph(Tape(), x).value

    def copy(self) -> "GatingMLP":
        return GatingMLP({k: v.copy() for k, v in self.params.items()}, self.n_out,
                         self.hidden, self.dropout_p, self.mu.copy(), self.sd.copy())


def save_mlp(mlp: GatingMLP, path) -> None:
    w = _binio.Writer()
    w.raw(GATING_MAGIC)
    w.u16(GATING_VERSION)
    w.text(json.dumps({"n_out": mlp.n_out, "hidden": mlp.hidden, "dropout_p": mlp.dropout_p}))
    arrays = {"mu": mlp.mu, "sd": mlp.sd, **mlp.params}
    w.u32(len(arrays))
    for k, v in arrays.items():
        w.text(k)
        w.dims(v.shape)
        w.array(v)
    Path(path).write_bytes(w.getvalue())


def load_mlp(path) -> GatingMLP:
    r = _binio.Reader(Path(path).read_bytes())
    _binio.check_magic(r, GATING_MAGIC, GATING_VERSION)
    meta = json.loads(r.text())
    arrays = {}
    for _ in range(r.u32()):
        k = r.text()
        arrays[k] = r.array(r.dims())
    r.expect_end()
    mu, sd = arrays.pop("mu"), arrays.pop("sd")
    return GatingMLP(arrays, meta["n_out"], meta["hidden"], meta["dropout_p"], mu, sd)


# ---------------------------------------------------------------- features and decisions


class FeatureCache:
    """h_key depends only on the first local token, so features are cached per token."""

    def __init__(self, model: TinyLM, registry: KeyRegistry):
        self.model = model
        self.registry = registry
        self._rows = registry.embed_rows()
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, gating_tokens: list[int]) -> np.ndarray:
        t = int(gating_tokens[0])
        if t not in self._cache:
            self._cache[t] = hidden_state_at(self.model, gating_tokens[:1], 0, self._rows)
        return self._cache[t]

    def prompts(self, prompts) -> np.ndarray:
        return np.stack([self(self.registry.encode_prompt(p)[0]) for p in prompts])


@dataclass
class GatingDecision:
    logits: np.ndarray
    probs: np.ndarray
    choice: int
    fallback_triggered: bool
    tau: float

    def to_json(self) -> dict:
        return {"logits": self.logits.tolist(), "probs": self.probs.tolist(),
                "choice": self.choice, "fallback_triggered": self.fallback_triggered,
                "tau": self.tau}


def decide(z: np.ndarray, tau: float) -> GatingDecision:
    """Softmax, argmax with ties to the secure slot, fallback when ``max p <= tau``."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    p = e / e.sum()
    top = float(p.max())
    winners = np.flatnonzero(p == top)
    choice = SECURE_INDEX if SECURE_INDEX in winners else int(winners[0])
    fallback = top <= tau
    return GatingDecision(z, p, SECURE_INDEX if fallback else choice, bool(fallback), tau)


def gate(mlp: GatingMLP, model: TinyLM, registry: KeyRegistry, prompt: str, tau: float = 0.5,
         features: FeatureCache | None = None) -> GatingDecision:
    gating_tokens, _ = registry.encode_prompt(prompt)
    if features is not None:
        h = features(gating_tokens)
    else:
        h = hidden_state_at(model, gating_tokens[:1], 0, registry.embed_rows())
    return decide(mlp.logits(h)[0], tau)


# ---------------------------------------------------------------- training


@dataclass
class GatingTrainResult:
    mlp: GatingMLP
    step_losses: list[float]
    initial_loss: float
    final_loss: float
    loss_after: dict[int, float] = field(default_factory=dict)


def _eval_loss(mlp: GatingMLP, x: np.ndarray, y: np.ndarray) -> float:
    tape = Tape()
    loss = tape.cross_entropy(mlp.graph(tape, x), y, np.ones(len(y)))
    return float(loss.value)


def train_gating(mlp: GatingMLP, features: np.ndarray, labels, steps: int = 20, seed: int = 0,
                 lr: float = 1e-2, weight_decay: float = 0.001, batch_size: int = 64,
                 record_at=(20,)) -> GatingTrainResult:
    """Minibatch AdamW on routing cross-entropy; only the MLP is updated.

    The input standardization is fitted on ``features`` and then frozen.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    missing = sorted(set(range(mlp.n_out)) - set(y.tolist()))
    if missing:
        raise ValueError(f"routing data has no examples for labels {missing}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    mlp = mlp.copy()
    mlp.mu = x.mean(axis=0)
    mlp.sd = np.maximum(x.std(axis=0), 1e-6)
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    initial = _eval_loss(mlp, x, y)
    losses, after = [], {}
    order = rng.permutation(len(y))
    pos = 0
    for step in range(1, steps + 1):
        if pos + batch_size > len(order):
            order, pos = rng.permutation(len(y)), 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        tape = Tape(seed=derive_seed(seed, "gating", step))
        loss = tape.cross_entropy(mlp.graph(tape, x[idx], training=True, trainable=True),
                                  y[idx], np.ones(len(idx)))
        opt.step(mlp.params, tape.backward(loss))
        losses.append(float(loss.value))
        if step in record_at:
            after[step] = _eval_loss(mlp, x, y)
    final = _eval_loss(mlp, x, y)
    return GatingTrainResult(mlp, losses, initial, final, after)


def build_router(model: TinyLM, registry: KeyRegistry, n_per_class: int = 200, steps: int = 60,
                 hidden: int = 128, dropout_p: float = 0.1, lr: float = 1e-2,
                 seed: int = 0) -> tuple[GatingTrainResult, FeatureCache]:
    """Synthesize routing data, compute features and train a fresh router."""
    data = synth_routing_data(registry, n_per_class, derive_seed(seed, "routing-data"))
    feats = FeatureCache(model, registry)
    x = feats.prompts([d.prompt for d in data])
    mlp = GatingMLP.init(model.config.embed_dim, registry.n_outputs, hidden, dropout_p,
                         derive_seed(seed, "mlp-init"))
    res = train_gating(mlp, x, [d.label for d in data], steps, derive_seed(seed, "mlp-train"),
                       lr=lr)
    return res, feats


# ---------------------------------------------------------------- inference


def two_pass_infer(model: TinyLM, adapters, mlp: GatingMLP, registry: KeyRegistry, prompt: str,
                   temperature: float = 1.0, max_new: int = 64, seed: int = 0, tau: float = 0.5,
                   features: FeatureCache | None = None) -> tuple[str, GatingDecision]:
    """Pass 1 routes on the keyed prompt; pass 2 generates from the key-free prompt.

    ``adapters[i]`` is the adapter for router output ``i`` (index 0 is secure).
    """
    decision = gate(mlp, model, registry, prompt, tau, features)
    _, clean = registry.encode_prompt(prompt)
    out = sample(model, adapters[decision.choice], clean, temperature, max_new, seed)
    return registry.tokenizer.decode(out), decision
