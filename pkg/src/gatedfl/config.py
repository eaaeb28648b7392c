"""Experiment configuration: YAML file, GATEDFL_* environment overrides, --set flags.

Precedence is CLI flag > environment > file > built-in default.  Every
problem found is collected and reported together.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .fedcore import DefenseConfig, OptimizerConfig
from .fusion import FusionConfig
from .attacks import ExtractionConfig, InferenceAttackConfig
from .lora import DEFAULT_RANKS
from .tinylm import ModelConfig

ENV_PREFIX = "GATEDFL_"

DEFAULTS: dict = {
    "seed": 0,
    "model": {"vocab_size": 160, "embed_dim": 64, "n_layers": 2, "context_len": 128,
              "n_heads": 1},
    "pretrain": {"steps": 300, "public_docs": 400, "lr": 3e-3, "batch_size": 16},
    "corpus": {"docs_per_client": 40, "query_size": 16, "dictionary_per_class": 600},
    "federation": {"n_clients": 10, "T": 20, "m": 0.5, "eta_global": 0.01},
    "optimizer": {"eta_local": 1e-4, "weight_decay": 0.001, "beta1": 0.9, "beta2": 0.999,
                  "eps": 1e-8, "epochs_K": 3, "batch_size": 16},
    "lora": {"r": 8, "alpha": None, "dropout": 0.1, "allow_custom_rank": False,
             "n_revealing": 1},
    "revealing": {"eta_local": 1e-2, "weight_decay": 0.001, "epochs": 30, "batch_size": 8},
    "privacy": {"defense": "scrub", "clip_norm": 1.0, "sigma": 0.5},
    "fusion": {"psi": 0.01, "query_set_size": 16, "budget": 200, "coeff_bounds": [-1.5, 1.5],
               "restarts": 3},
    "gating": {"tau": 0.5, "hidden": 128, "dropout": 0.1, "n_per_class": 200, "steps": 60,
               "lr": 1e-2, "secret": "local-org-secret"},
    "attacks": {"candidate_pool_c": 50, "n_contexts": 100, "pii_class": None,
                "extraction_samples": 32, "extraction_max_new": 96, "temperature": 1.0},
    "runtime": {"jobs": 1},
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    def __getitem__(self, section):
        return self.raw[section]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(**self.raw["model"])

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(**self.raw["optimizer"])

    @property
    def revealing_optimizer(self) -> OptimizerConfig:
        r, o = self.raw["revealing"], self.raw["optimizer"]
        return OptimizerConfig(eta_local=r["eta_local"], weight_decay=r["weight_decay"],
                               beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                               epochs_K=r["epochs"], batch_size=r["batch_size"])

    @property
    def defense(self) -> DefenseConfig:
        p = self.raw["privacy"]
        return DefenseConfig.from_name(p["defense"], p["clip_norm"], p["sigma"])

    @property
    def fusion(self) -> FusionConfig:
        f = self.raw["fusion"]
        return FusionConfig(psi=f["psi"], query_set_size=f["query_set_size"], budget=f["budget"],
                            coeff_bounds=tuple(f["coeff_bounds"]), restarts=f["restarts"])

    @property
    def inference(self) -> InferenceAttackConfig:
        a = self.raw["attacks"]
        return InferenceAttackConfig(a["candidate_pool_c"], a["n_contexts"], a["pii_class"])

    @property
    def extraction(self) -> ExtractionConfig:
        a = self.raw["attacks"]
        return ExtractionConfig(a["extraction_samples"], a["extraction_max_new"], a["temperature"])

    @property
    def lora_alpha(self) -> float:
        lo = self.raw["lora"]
        return 4.0 * lo["r"] if lo["alpha"] is None else float(lo["alpha"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


# ---------------------------------------------------------------- merging


def _merge(base: dict, over: dict, path: str, errors: list[str]) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            errors.append(f"unknown key '{where}'")
        elif isinstance(base[k], dict):
            if not isinstance(v, dict):
                errors.append(f"'{where}' must be a mapping")
            else:
                out[k] = _merge(base[k], v, where + ".", errors)
        else:
            out[k] = v
    return out


def _set_path(tree: dict, dotted: str, value, errors: list[str], source: str) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            errors.append(f"unknown key '{dotted}' ({source})")
            return
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        errors.append(f"unknown key '{dotted}' ({source})")
        return
    node[parts[-1]] = value


def env_overrides(environ=None) -> dict[str, object]:
    """``GATEDFL_SECTION__FIELD=value`` -> ``{"section.field": parsed value}``."""
    environ = os.environ if environ is None else environ
    # env names are upper case; map back to the real (possibly mixed-case) field names
    known = {f"{s}.{f}".lower(): f"{s}.{f}" for s, sec in DEFAULTS.items() if isinstance(sec, dict)
             for f in sec}
    known.update({s.lower(): s for s, sec in DEFAULTS.items() if not isinstance(sec, dict)})
    out = {}
    for k, v in sorted(environ.items()):
        if k.startswith(ENV_PREFIX):
            path = k[len(ENV_PREFIX):].lower().replace("__", ".")
            out[known.get(path, path)] = yaml.safe_load(v)
    return out


def parse_set(items) -> dict[str, object]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


# ---------------------------------------------------------------- validation


def _num(errors, tree, dotted, cond, msg, types=(int, float)):
    sec, key = dotted.split(".")
    v = tree[sec][key]
    if isinstance(v, bool) or not isinstance(v, types):
        errors.append(f"{dotted} must be a number")
        return
    if not cond(v):
        errors.append(msg)


def _check(tree: dict) -> list[str]:
    errors: list[str] = []
    pos = lambda x: x > 0  # noqa: E731
    if isinstance(tree["seed"], bool) or not isinstance(tree["seed"], int) or tree["seed"] < 0:
        errors.append("seed must be a non-negative integer")

    try:
        errors += ModelConfig(**tree["model"]).problems()
    except (TypeError, ValueError) as e:
        errors.append(f"model: {e}")

    for k in ("steps", "public_docs", "batch_size"):
        _num(errors, tree, f"pretrain.{k}", pos, f"pretrain.{k} must be positive", (int,))
    _num(errors, tree, "pretrain.lr", pos, "pretrain.lr must be positive")
    for k in ("docs_per_client", "query_size", "dictionary_per_class"):
        _num(errors, tree, f"corpus.{k}", pos, f"corpus.{k} must be positive", (int,))

    _num(errors, tree, "federation.n_clients", pos, "n_clients must be positive", (int,))
    _num(errors, tree, "federation.T", pos, "T must be positive", (int,))
    _num(errors, tree, "federation.m", lambda m: 0 <= m < 1, "m must be in [0,1)")
    _num(errors, tree, "federation.eta_global", pos, "eta_global must be positive")

    try:
        OptimizerConfig(**tree["optimizer"])
    except (TypeError, ValueError) as e:
        errors.append(f"optimizer: {e}")

    lo = tree["lora"]
    r = lo["r"]
    if isinstance(r, bool) or not isinstance(r, int) or r < 1:
        errors.append("lora.r must be a positive integer")
    elif not lo["allow_custom_rank"] and r not in DEFAULT_RANKS:
        errors.append(f"lora.r = {r} not in {DEFAULT_RANKS} (set lora.allow_custom_rank to allow)")
    elif isinstance(tree["model"].get("embed_dim"), int) and r > tree["model"]["embed_dim"]:
        errors.append(f"lora.r = {r} exceeds embed_dim")
    if lo["alpha"] is not None and not (isinstance(lo["alpha"], (int, float)) and lo["alpha"] > 0):
        errors.append("lora.alpha must be positive or null")
    _num(errors, tree, "lora.dropout", lambda p: 0 <= p < 1, "lora.dropout must be in [0,1)")
    _num(errors, tree, "lora.n_revealing", lambda n: 1 <= n <= 8,
         "lora.n_revealing must be in [1, 8]", (int,))

    for k in ("eta_local", "epochs", "batch_size"):
        _num(errors, tree, f"revealing.{k}", pos, f"revealing.{k} must be positive")
    _num(errors, tree, "revealing.weight_decay", lambda x: x >= 0,
         "revealing.weight_decay must be >= 0")

    p = tree["privacy"]
    if p["defense"] not in ("scrub", "dp", "scrub+dp"):
        errors.append("privacy.defense must be one of scrub, dp, scrub+dp")
    _num(errors, tree, "privacy.clip_norm", pos, "privacy.clip_norm must be > 0")
    _num(errors, tree, "privacy.sigma", lambda s: s >= 0, "privacy.sigma must be >= 0")

    f = tree["fusion"]
    try:
        bounds = f["coeff_bounds"]
        if not (isinstance(bounds, (list, tuple)) and len(bounds) == 2):
            raise ValueError("coeff_bounds must be a pair [lo, hi]")
        FusionConfig(psi=f["psi"], query_set_size=f["query_set_size"], budget=f["budget"],
                     coeff_bounds=tuple(bounds), restarts=f["restarts"])
    except (TypeError, ValueError) as e:
        errors.append(f"fusion: {e}")

    _num(errors, tree, "gating.tau", lambda t: 0 <= t < 1, "gating.tau must be in [0,1)")
    for k in ("hidden", "n_per_class", "steps"):
        _num(errors, tree, f"gating.{k}", pos, f"gating.{k} must be positive", (int,))
    _num(errors, tree, "gating.dropout", lambda x: 0 <= x < 1, "gating.dropout must be in [0,1)")
    _num(errors, tree, "gating.lr", pos, "gating.lr must be positive")
    if not isinstance(tree["gating"]["secret"], str) or not tree["gating"]["secret"]:
        errors.append("gating.secret must be a non-empty string")

    a = tree["attacks"]
    for k in ("candidate_pool_c", "n_contexts", "extraction_samples"):
        _num(errors, tree, f"attacks.{k}", pos, f"attacks.{k} must be positive", (int,))
    _num(errors, tree, "attacks.extraction_max_new", lambda x: x >= 0,
         "attacks.extraction_max_new must be >= 0", (int,))
    _num(errors, tree, "attacks.temperature", pos, "attacks.temperature must be > 0")
    if a["pii_class"] is not None:
        from .privacy import PII_CLASSES
        if a["pii_class"] not in PII_CLASSES:
            errors.append(f"attacks.pii_class must be one of {PII_CLASSES} or null")
    if isinstance(a["candidate_pool_c"], int) and isinstance(
            tree["corpus"]["dictionary_per_class"], int) and \
            a["candidate_pool_c"] > tree["corpus"]["dictionary_per_class"]:
        errors.append("attacks.candidate_pool_c exceeds corpus.dictionary_per_class")

    _num(errors, tree, "runtime.jobs", pos, "runtime.jobs must be positive", (int,))
    return errors


def resolve(file_tree: dict | None = None, env: dict | None = None,
            sets: dict | None = None) -> ExperimentConfig:
    errors: list[str] = []
    tree = _merge(DEFAULTS, file_tree or {}, "", errors)
    for source, over in (("environment", env or {}), ("--set", sets or {})):
        for k, v in over.items():
            _set_path(tree, k, v, errors, source)
    if not errors:
        errors = _check(tree)
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(tree)


def load_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError([f"cannot parse {path}: {e}"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return data


def validate_config(path=None, environ=None, sets=None) -> ExperimentConfig:
    """Load ``path`` (or defaults), apply overrides, validate everything at once.

    ``environ`` defaults to the process environment; pass ``{}`` to ignore it.
    """
    tree = load_file(path) if path is not None else {}
    return resolve(tree, env_overrides(environ), sets)
