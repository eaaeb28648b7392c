"""Leakage measurements: candidate-ranking inference, sampling extraction, FLOPs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import binom

from .gating import SECURE_INDEX, FeatureCache, GatingMLP, KeyRegistry, format_prompt, gate
from .privacy import PII_CLASSES, TEMPLATES, ClientDataset, PiiDetector
from .seeding import derive_seed
from .tinylm import ModelConfig, TinyLM, perplexity_from_log_probs, sample_batch, \
    sequence_log_probs
from .tokenizer import EOT, CharTokenizer

CONDITIONS = ("correct_token", "wrong_token", "no_token")
PHASES = ("initialization", "optimization", "fusion")


@dataclass(frozen=True)
class InferenceAttackConfig:
    candidate_pool_c: int = 50
    n_contexts: int = 100
    pii_class: str | None = None

    def problems(self, dictionary: dict | None = None) -> list[str]:
        out = []
        if self.candidate_pool_c < 1:
            out.append("candidate_pool_c must be >= 1")
        if self.n_contexts < 1:
            out.append("n_contexts must be >= 1")
        if self.pii_class is not None and self.pii_class not in PII_CLASSES:
            out.append(f"pii_class must be one of {PII_CLASSES}")
        if dictionary is not None:
            classes = [self.pii_class] if self.pii_class else PII_CLASSES
            for c in classes:
                if len(dictionary.get(c, ())) < self.candidate_pool_c:
                    out.append(f"dictionary class {c} smaller than candidate_pool_c")
        return out


@dataclass(frozen=True)
class ExtractionConfig:
    n_samples: int = 32
    max_new: int = 96
    temperature: float = 1.0


@dataclass(frozen=True)
class AttackContext:
    prefix: str
    suffix: str
    cls: str
    truth: str


@dataclass
class InferenceResult:
    accuracy: float
    per_class: dict[str, float]
    predictions: list[str]
    truths: list[str]


@dataclass
class ExtractionResult:
    precision: float
    recall: float
    extracted: list[str]
    flags: list[str] = field(default_factory=list)


@dataclass
class AttackReport:
    client_id: int
    condition: str
    adapter_path: str
    inference_accuracy: float
    extraction_precision: float
    extraction_recall: float
    ppl: float
    routing_accuracy: float
    per_class: dict[str, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def chance_band(n: int, p: float, level: float = 0.99) -> tuple[float, float]:
    """Exact binomial interval for an accuracy measured on ``n`` trials."""
    lo, hi = binom.ppf([(1 - level) / 2, (1 + level) / 2], n, p)
    return float(lo) / n, float(hi) / n


# ---------------------------------------------------------------- inference attack


def make_contexts(dataset: ClientDataset, n_contexts: int, seed: int,
                  pii_class: str | None = None) -> list[AttackContext]:
    """Training statements with one PII slot opened (the rest stay filled)."""
    pool = [(d, s) for d in dataset.raw_view for s in d.pii_spans
            if pii_class is None or s.cls == pii_class]
    if not pool:
        raise ValueError("no PII spans available for contexts")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=n_contexts, replace=n_contexts > len(pool))
    out = []
    for i in idx:
        d, s = pool[int(i)]
        out.append(AttackContext(d.text[: s.start], d.text[s.end:], s.cls, s.value))
    return out


def candidate_pool(ctx: AttackContext, dictionary: dict, c: int,
                   rng: np.random.Generator) -> list[str]:
    """Truth plus ``c - 1`` distinct same-class decoys, in shuffled order."""
    values = [v for v in dictionary[ctx.cls] if v != ctx.truth]
    if len(values) < c - 1:
        raise ValueError(f"pool for {ctx.cls} has {len(values) + 1} values, need {c}")
    decoys = [values[int(i)] for i in rng.choice(len(values), size=c - 1, replace=False)]
    cands = [ctx.truth, *decoys]
    return [cands[int(i)] for i in rng.permutation(c)]


class _Scorer:
    """Sequence PPL under one adapter, memoized per text."""

    def __init__(self, model: TinyLM, adapter, tokenizer: CharTokenizer):
        self.model, self.adapter, self.tok = model, adapter, tokenizer
        self.cache: dict[str, float] = {}

    def ppl(self, texts: list[str]) -> list[float]:
        missing = sorted({t for t in texts if t not in self.cache})
        if missing:
            ctx = self.model.config.context_len
            seqs = [self.tok.encode_doc(t)[: ctx + 1] for t in missing]
            for t, lp in zip(missing, sequence_log_probs(self.model, self.adapter, seqs)):
                self.cache[t] = perplexity_from_log_probs(lp)
        return [self.cache[t] for t in texts]


def _attack_pools(contexts, dictionary, c, seed):
    rng = np.random.default_rng(seed)
    return [candidate_pool(ctx, dictionary, c, rng) for ctx in contexts]


def inference_attack(model: TinyLM, adapter, contexts: list[AttackContext], dictionary: dict,
                     c: int, seed: int, tokenizer: CharTokenizer | None = None,
                     scorer: _Scorer | None = None) -> InferenceResult:
    """Predict each context's PII value as the candidate with the lowest statement PPL."""
    if c < 1:
        raise ValueError("candidate pool size must be >= 1")
    scorer = scorer or _Scorer(model, adapter, tokenizer or CharTokenizer(model.config.vocab_size))
    pools = _attack_pools(contexts, dictionary, c, seed)
    texts = [ctx.prefix + v + ctx.suffix for ctx, pool in zip(contexts, pools) for v in pool]
    scores = scorer.ppl(texts)
    preds, pos = [], 0
    for pool in pools:
        s = scores[pos:pos + len(pool)]
        preds.append(pool[int(np.argmin(s))])
        pos += len(pool)
    return _summarize(contexts, preds)


def _summarize(contexts, preds) -> InferenceResult:
    hits = [p == ctx.truth for p, ctx in zip(preds, contexts)]
    per_class = {}
    for cls in PII_CLASSES:
        h = [x for x, ctx in zip(hits, contexts) if ctx.cls == cls]
        if h:
            per_class[cls] = float(np.mean(h))
    return InferenceResult(float(np.mean(hits)) if hits else 0.0, per_class, preds,
                           [ctx.truth for ctx in contexts])


# ---------------------------------------------------------------- extraction attack


def extraction_prompts(n: int, tokenizer: CharTokenizer) -> list[list[int]]:
    """Empty prompt plus template openings (text before the first PII slot)."""
    openings = sorted({t[: t.index("{")] for t in TEMPLATES})
    prompts = [[EOT]] + [[EOT, *tokenizer.encode(o)] for o in openings]
    return [prompts[i % len(prompts)] for i in range(n)]


def sample_entities(model: TinyLM, adapter, prompts: list[list[int]], detector: PiiDetector,
                    cfg: ExtractionConfig, seed: int, tokenizer: CharTokenizer) -> set[str]:
    outs = sample_batch(model, adapter, prompts, cfg.temperature, cfg.max_new, seed)
    found = set()
    for p, o in zip(prompts, outs):
        text = tokenizer.decode(p + o)
        found.update(s.value for s in detector(text))
    return found


def extraction_scores(entities: set[str], baseline: set[str], truth: set[str]) -> ExtractionResult:
    """Baseline subtraction, then precision/recall with zero-denominator flags."""
    extracted = entities - baseline
    flags = []
    hit = len(extracted & truth)
    if extracted:
        precision = hit / len(extracted)
    else:
        precision = 0.0
        flags.append("no_entities_extracted")
    if truth:
        recall = hit / len(truth)
    else:
        recall = 0.0
        flags.append("empty_truth_set")
    return ExtractionResult(precision, recall, sorted(extracted), flags)


def extraction_attack(model: TinyLM, adapter, n_samples: int, detector: PiiDetector,
                      client_pii_truth: set[str], baseline_model: TinyLM | None, seed: int,
                      cfg: ExtractionConfig | None = None,
                      tokenizer: CharTokenizer | None = None) -> ExtractionResult:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cfg = cfg or ExtractionConfig(n_samples=n_samples)
    tokenizer = tokenizer or CharTokenizer(model.config.vocab_size)
    prompts = extraction_prompts(n_samples, tokenizer)
    found = sample_entities(model, adapter, prompts, detector, cfg, seed, tokenizer)
    base = set() if baseline_model is None else sample_entities(
        baseline_model, None, prompts, detector, cfg, seed, tokenizer)
    return extraction_scores(found, base, set(client_pii_truth))


# ---------------------------------------------------------------- per-condition evaluation


@dataclass
class ClientSystem:
    """Everything one organisation serves: routed adapters, keys and the router."""

    client_id: int
    adapters: list  # index 0 secure, then revealing adapters by router output
    registry: KeyRegistry
    mlp: GatingMLP
    key_id: str
    tau: float = 0.5
    adapter_names: list[str] = field(default_factory=lambda: ["secure", "revealing"])


def wrong_key(key_id: str) -> str:
    return key_id + "_CORRUPT"


def condition_key(system: ClientSystem, condition: str) -> str | None:
    if condition == "correct_token":
        return system.key_id
    if condition == "wrong_token":
        return wrong_key(system.key_id)
    if condition == "no_token":
        return None
    raise ValueError(f"unknown condition {condition!r}")


def evaluate_conditions(system: ClientSystem, model: TinyLM, dataset: ClientDataset,
                        dictionary: dict, detector: PiiDetector, inf_cfg: InferenceAttackConfig,
                        ext_cfg: ExtractionConfig, seed: int,
                        baseline_entities: set[str] | None = None,
                        conditions=CONDITIONS) -> list[AttackReport]:
    """Run both attacks and PPL under each access condition.

    Every query is routed through the gating pass; scoring and sampling then
    use the selected adapter on the key-free text.  Work is shared between
    conditions that route to the same adapter.
    """
    tok = system.registry.tokenizer
    feats = FeatureCache(model, system.registry)
    contexts = make_contexts(dataset, inf_cfg.n_contexts, derive_seed(seed, "contexts"),
                             inf_cfg.pii_class)
    pools = _attack_pools(contexts, dictionary, inf_cfg.candidate_pool_c,
                          derive_seed(seed, "pools"))
    prompts = extraction_prompts(ext_cfg.n_samples, tok)
    ppl_docs = [d.text for d in (dataset.query_raw or dataset.raw_view)]
    truth = dataset.planted_values()
    if baseline_entities is None:
        baseline_entities = sample_entities(model, None, prompts, detector, ext_cfg,
                                            derive_seed(seed, "extraction"), tok)

    scorers: dict[int, _Scorer] = {}
    samples: dict[int, list[str]] = {}

    def scorer(i):
        if i not in scorers:
            scorers[i] = _Scorer(model, system.adapters[i], tok)
        return scorers[i]

    def route(key, body):
        return gate(system.mlp, model, system.registry, format_prompt(key, body), system.tau,
                    feats).choice

    reports = []
    for cond in conditions:
        key = condition_key(system, cond)
        intended = system.registry.keys[system.key_id].adapter_index \
            if cond == "correct_token" else SECURE_INDEX

        # inference attack
        preds, routed = [], []
        for ctx, pool in zip(contexts, pools):
            a = route(key, ctx.prefix + ctx.truth + ctx.suffix)
            routed.append(a)
            s = scorer(a).ppl([ctx.prefix + v + ctx.suffix for v in pool])
            preds.append(pool[int(np.argmin(s))])
        inf = _summarize(contexts, preds)

        # extraction attack: route each prompt, sample per adapter with shared seeds
        bodies = [tok.decode(p) for p in prompts]
        ext_routes = [route(key, b) for b in bodies]
        entities = set()
        for a in sorted(set(ext_routes)):
            if a not in samples:
                outs = sample_batch(model, system.adapters[a], prompts, ext_cfg.temperature,
                                    ext_cfg.max_new, derive_seed(seed, "extraction"))
                samples[a] = [tok.decode(p + o) for p, o in zip(prompts, outs)]
            for i, r in enumerate(ext_routes):
                if r == a:
                    entities.update(s.value for s in detector(samples[a][i]))
        ext = extraction_scores(entities, baseline_entities, truth)
        routed += ext_routes

        # perplexity on raw-view evaluation text, pooled over tokens
        lps = []
        for text in ppl_docs:
            a = route(key, text)
            routed.append(a)
            seq = tok.encode_doc(text)[: model.config.context_len + 1]
            lps.append(sequence_log_probs(model, system.adapters[a], [seq])[0])
        ppl = perplexity_from_log_probs(lps)

        used = sorted(set(routed))
        path = "+".join(system.adapter_names[a] for a in used)
        reports.append(AttackReport(
            client_id=system.client_id, condition=cond, adapter_path=path,
            inference_accuracy=inf.accuracy, extraction_precision=ext.precision,
            extraction_recall=ext.recall, ppl=ppl,
            routing_accuracy=float(np.mean([a == intended for a in routed])),
            per_class=inf.per_class, flags=ext.flags,
        ))
    return reports


# ---------------------------------------------------------------- FLOPs


def flops_account(phase: str, trace: dict) -> int:
    """FLOPs (2 per multiply-accumulate) recorded for ``phase``."""
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    entry = trace.get(phase)
    if entry is None:
        return 0
    return int(entry.flops if hasattr(entry, "flops") else entry)


def forward_flops(config: ModelConfig, batch: int, length: int, rank: int | None = None) -> int:
    """Analytic matmul FLOPs of one forward pass over a ``(batch, length)`` id array.

    ``rank`` adds the two low-rank products at each attachment point; dense
    fused deltas cost the same as the base model.
    """
    d, T, V = config.embed_dim, length, config.vocab_size
    per_layer = 4 * T * d * d + 2 * T * T * d + 2 * T * 4 * d * d
    if rank:
        per_layer += 2 * (T * rank * d + T * d * rank)  # q and v
    macs = batch * (config.n_layers * per_layer + T * V * d)
    return 2 * macs


def sequence_batches(seqs, batch_size: int = 64) -> list[tuple[int, int]]:
    """The ``(batch, padded_length)`` shapes :func:`sequence_log_probs` will run."""
    lens = sorted(len(s) - 1 for s in seqs)
    return [(len(lens[i:i + batch_size]), max(lens[i:i + batch_size]))
            for i in range(0, len(lens), batch_size)]


def fusion_flops_model(config: ModelConfig, query_seqs, evaluations: int) -> int:
    per_eval = sum(forward_flops(config, b, t) for b, t in sequence_batches(query_seqs))
    return evaluations * per_eval
