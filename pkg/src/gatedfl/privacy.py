"""Synthetic PII corpora, an exact dictionary/pattern PII detector, scrubbing and DP noise.

The generator and the detector share one dictionary, so detection on generated
text is exact: any leakage measured downstream is due to the training protocol,
not to detector mistakes.
"""

from __future__ import annotations

import datetime as _dt
import itertools
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import MASK_TEXT

PII_CLASSES = ("PERSON", "LOC", "ORG", "PRODUCT", "DATE")
DATE_RE = r"\d{4}-\d{2}-\d{2}"


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    cls: str
    value: str


@dataclass(frozen=True)
class Document:
    text: str
    pii_spans: tuple[Span, ...] = ()

    def values(self) -> set[str]:
        return {s.value for s in self.pii_spans}


@dataclass
class ClientDataset:
    client_id: int
    raw_view: list[Document]
    masked_view: list[Document]
    query_raw: list[Document] = field(default_factory=list)
    query_masked: list[Document] = field(default_factory=list)

    def __post_init__(self):
        if len(self.raw_view) != len(self.masked_view):
            raise ValueError("raw and masked views must have equal length")

    @property
    def size(self) -> int:
        return len(self.raw_view)

    def planted_values(self) -> set[str]:
        return set().union(*(d.values() for d in self.raw_view)) if self.raw_view else set()


# ---------------------------------------------------------------- dictionary

_FIRST = ["Alice", "Bruno", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines",
          "Jonas", "Katia", "Lorenz", "Mira", "Nils", "Olga", "Pavel", "Quinn", "Rosa",
          "Stefan", "Tamar", "Ugo", "Vera", "Wim", "Xenia", "Yusuf", "Zora", "Anton",
          "Berit", "Cyril", "Dalia"]
_LAST = ["Moreau", "Keller", "Novak", "Lindqvist", "Petrov", "Romano", "Dubois", "Haas",
         "Jansen", "Kowalski", "Larsen", "Meyer", "Nagy", "Ortega", "Popescu", "Quist",
         "Richter", "Silva", "Toth", "Ulrich", "Varga", "Weber", "Yilmaz", "Zeller",
         "Brandt", "Costa", "Dahl", "Engel", "Fischer", "Gruber"]
_LOC_HEAD = ["Ash", "Bel", "Cor", "Dun", "Elm", "Fal", "Gar", "Hol", "Ivr", "Jor", "Kel",
             "Lun", "Mar", "Nor", "Orm", "Pel", "Ros", "Sal", "Tor", "Umb", "Vel", "Wex",
             "Yar", "Zel", "Bran", "Cald", "Dray", "Fenn"]
_LOC_TAIL = ["ford", "ville", "stad", "burg", "haven", "mouth", "field", "wick", "moor",
             "gate", "holm", "by", "dale", "port", "minster", "ton", "ness", "bridge",
             "crest", "vale", "wold", "keep"]
_ORG_HEAD = ["Norvik", "Altera", "Bexley", "Corvan", "Dunmore", "Eskara", "Fjordline",
             "Grantham", "Helios", "Istria", "Jadeport", "Kestrel", "Lumora", "Meridian",
             "Nexara", "Orvieto", "Pallas", "Quorra", "Rhenda", "Solenne", "Tavira",
             "Umbria", "Valdor", "Westmark", "Yonder", "Zephra", "Arcadia"]
_ORG_TAIL = ["Holdings", "Logistics", "Bank", "Insurance", "Clinic", "Foods", "Motors",
             "Textiles", "Media", "Energy", "Pharma", "Airways", "Realty", "Telecom",
             "Partners", "Security", "Hotels", "Mining", "Bakery", "Brewery", "Capital",
             "Robotics", "Shipping"]
_PROD_HEAD = ["Zenta", "Quill", "Vortex", "Lumen", "Kairo", "Orbit", "Pixel", "Nimbus",
              "Axon", "Bolt", "Cirra", "Drift", "Ember", "Flux", "Glide", "Halo", "Ion",
              "Jolt", "Krypt", "Lyra", "Mako", "Nova", "Opal", "Prism", "Rune"]
_PROD_TAIL = ["X100", "X200", "Pro", "Mini", "Max", "Air", "Lite", "S3", "S5", "Ultra",
              "Go", "One", "Neo", "Plus", "Duo", "Edge", "Core", "Flex", "Zen", "Q7",
              "T9", "R2", "Vue", "Arc", "Wave"]


def build_dictionary(per_class: int = 600, seed: int = 0) -> dict[str, list[str]]:
    """A fixed PII dictionary with ``per_class`` distinct values per class."""
    rng = np.random.default_rng(seed)
    pools = {
        "PERSON": [f"{a} {b}" for a, b in itertools.product(_FIRST, _LAST)],
        "LOC": [a + b for a, b in itertools.product(_LOC_HEAD, _LOC_TAIL)],
        "ORG": [f"{a} {b}" for a, b in itertools.product(_ORG_HEAD, _ORG_TAIL)],
        "PRODUCT": [f"{a} {b}" for a, b in itertools.product(_PROD_HEAD, _PROD_TAIL)],
    }
    start = _dt.date(1995, 1, 1)
    pools["DATE"] = [(start + _dt.timedelta(days=int(i))).isoformat() for i in range(0, 3 * 3650, 7)]
    out = {}
    for cls in PII_CLASSES:
        pool = pools[cls]
        if per_class > len(pool):
            raise ValueError(f"cannot build {per_class} {cls} values (max {len(pool)})")
        idx = np.sort(rng.choice(len(pool), size=per_class, replace=False))
        out[cls] = [pool[i] for i in idx]
    return out


def save_dictionary(dictionary: dict[str, list[str]], path) -> None:
    Path(path).write_text(json.dumps(dictionary, indent=1, sort_keys=True))


def load_dictionary(path) -> dict[str, list[str]]:
    d = json.loads(Path(path).read_text())
    unknown = set(d) - set(PII_CLASSES)
    if unknown:
        raise ValueError(f"unknown PII classes in dictionary: {sorted(unknown)}")
    return {k: list(v) for k, v in d.items()}


# ---------------------------------------------------------------- generation

TEMPLATES = [
    "On {DATE}, {PERSON} was detained in {LOC} by officers of {ORG}.",
    "{PERSON} bought a {PRODUCT} at {ORG} in {LOC} on {DATE}.",
    "The applicant {PERSON} lodged a complaint against {ORG} on {DATE}.",
    "{PERSON} from {LOC} reviewed the {PRODUCT} and gave it four stars.",
    "In {LOC}, {ORG} dismissed {PERSON} on {DATE}.",
    "{PERSON} said the {PRODUCT} from {ORG} broke after a week.",
    "The court in {LOC} heard {PERSON} on {DATE}.",
    "{PERSON} works for {ORG} and lives in {LOC}.",
]

_SLOT = re.compile(r"\{(" + "|".join(PII_CLASSES) + r")\}")


def fill_template(template: str, values: dict[str, str]) -> Document:
    parts, spans, pos = [], [], 0
    last = 0
    for m in _SLOT.finditer(template):
        lit = template[last:m.start()]
        parts.append(lit)
        pos += len(lit)
        cls = m.group(1)
        v = values[cls]
        spans.append(Span(pos, pos + len(v), cls, v))
        parts.append(v)
        pos += len(v)
        last = m.end()
    parts.append(template[last:])
    return Document("".join(parts), tuple(spans))


def generate_documents(n: int, dictionary: dict[str, list[str]],
                       rng: np.random.Generator) -> list[Document]:
    docs = []
    for _ in range(n):
        t = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
        values = {c: dictionary[c][int(rng.integers(len(dictionary[c])))] for c in PII_CLASSES}
        docs.append(fill_template(t, values))
    return docs


def generate_corpus(n_clients: int, docs_per_client: int, pii_dictionary: dict[str, list[str]],
                    seed: int, query_size: int = 16, min_per_class: int = 50,
                    detector_dictionary=None) -> list[ClientDataset]:
    """Disjoint per-client datasets; each client also gets ``query_size`` held-out docs."""
    small = [c for c in PII_CLASSES if len(pii_dictionary.get(c, ())) < min_per_class]
    if small:
        raise ValueError(f"dictionary has fewer than {min_per_class} entries for {small}")
    if n_clients < 1 or docs_per_client < 1:
        raise ValueError("n_clients and docs_per_client must be >= 1")
    rng = np.random.default_rng(seed)
    det = detector_dictionary or pii_dictionary
    out = []
    for cid in range(n_clients):
        raw = generate_documents(docs_per_client + query_size, pii_dictionary, rng)
        masked = [scrub(d, detect_pii(d.text, det)) for d in raw]
        out.append(ClientDataset(cid, raw[:docs_per_client], masked[:docs_per_client],
                                 raw[docs_per_client:], masked[docs_per_client:]))
    return out


# ---------------------------------------------------------------- detection / scrubbing

class PiiDetector:
    """Compiled matcher for one dictionary: dictionary values plus the DATE pattern."""

    def __init__(self, dictionary: dict[str, list[str]]):
        self.dictionary = dictionary
        self.lookup = {v: c for c in PII_CLASSES if c != "DATE" for v in dictionary.get(c, ())}
        # longest alternatives first so the regex prefers the longest match
        body = "|".join(re.escape(a) for a in sorted(self.lookup, key=len, reverse=True))
        self.pattern = re.compile(
            rf"(?<![A-Za-z0-9])(?:(?P<date>{DATE_RE})|(?P<dict>{body or '(?!)'}))(?![A-Za-z0-9])"
        )

    def __call__(self, text: str) -> list[Span]:
        spans = []
        for m in self.pattern.finditer(text):
            v = m.group(0)
            cls = "DATE" if m.group("date") else self.lookup[v]
            spans.append(Span(m.start(), m.end(), cls, v))
        return spans


_detectors: dict[int, PiiDetector] = {}


def _as_detector(dictionary) -> PiiDetector:
    if isinstance(dictionary, PiiDetector):
        return dictionary
    det = _detectors.get(id(dictionary))
    if det is None or det.dictionary is not dictionary:
        det = PiiDetector(dictionary)
        _detectors.clear()
        _detectors[id(dictionary)] = det
    return det


def detect_pii(text: str, dictionary) -> list[Span]:
    """Longest-match, left-to-right, non-overlapping PII spans.

    ``dictionary`` is a class -> values mapping or a prebuilt :class:`PiiDetector`.
    """
    return _as_detector(dictionary)(text)


def scrub(doc: Document | str, spans) -> Document:
    text = doc.text if isinstance(doc, Document) else doc
    spans = sorted(spans, key=lambda s: s.start)
    prev_end = 0
    for s in spans:
        if not (0 <= s.start < s.end <= len(text)) or s.start < prev_end:
            raise ValueError(f"invalid span {s} for text of length {len(text)}")
        prev_end = s.end
    for s in reversed(spans):
        text = text[: s.start] + MASK_TEXT + text[s.end:]
    return Document(text, ())


def detection_scores(docs: list[Document], dictionary) -> tuple[float, float]:
    """(precision, recall) of :func:`detect_pii` against the recorded spans."""
    tp = n_pred = n_true = 0
    for d in docs:
        pred = {(s.start, s.end, s.cls) for s in detect_pii(d.text, dictionary)}
        true = {(s.start, s.end, s.cls) for s in d.pii_spans}
        tp += len(pred & true)
        n_pred += len(pred)
        n_true += len(true)
    return (tp / n_pred if n_pred else 0.0), (tp / n_true if n_true else 0.0)


# ---------------------------------------------------------------- DP noise


def dp_noise(update: dict[str, np.ndarray], clip_norm: float, sigma: float,
             seed: int) -> dict[str, np.ndarray]:
    """Clip the global L2 norm to ``clip_norm`` then add N(0, (sigma*clip_norm)^2)."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be > 0")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    norm = float(np.sqrt(sum(float((v * v).sum()) for v in update.values())))
    factor = min(1.0, clip_norm / norm) if norm > 0 else 1.0
    rng = np.random.default_rng(seed)
    out = {}
    for k in sorted(update):
        v = update[k] * factor
        if sigma > 0:
            v = v + rng.normal(0.0, sigma * clip_norm, size=v.shape)
        out[k] = v
    return out


# ---------------------------------------------------------------- persistence


def _doc_json(doc: Document, **extra) -> dict:
    return {
        **extra,
        "text": doc.text,
        "spans": [[s.start, s.end, s.cls, s.value] for s in doc.pii_spans],
    }


def save_corpus(datasets: list[ClientDataset], path) -> None:
    with open(path, "w") as f:
        for ds in datasets:
            for split, view, docs in (
                ("train", "raw", ds.raw_view), ("train", "masked", ds.masked_view),
                ("query", "raw", ds.query_raw), ("query", "masked", ds.query_masked),
            ):
                for d in docs:
                    f.write(json.dumps(_doc_json(d, client_id=ds.client_id, split=split,
                                                 view=view)) + "\n")


def load_corpus(path) -> list[ClientDataset]:
    buckets: dict[int, dict[tuple[str, str], list[Document]]] = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            o = json.loads(line)
            doc = Document(o["text"], tuple(Span(*s) for s in o["spans"]))
            buckets.setdefault(o["client_id"], {}).setdefault((o["split"], o["view"]), []).append(doc)
    out = []
    for cid in sorted(buckets):
        b = buckets[cid]
        out.append(ClientDataset(cid, b.get(("train", "raw"), []), b.get(("train", "masked"), []),
                                 b.get(("query", "raw"), []), b.get(("query", "masked"), [])))
    return out
