"""End-to-end experiment: corpus -> base -> adapters -> rounds -> fusion -> router -> attacks.

Each stage reads its inputs from the run directory and writes its outputs
there, so any stage can be rerun on its own once its predecessors exist.
"""

from __future__ import annotations

import csv
import hashlib
import hmac
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import lora
from .attacks import (CONDITIONS, ClientSystem, evaluate_conditions, extraction_prompts,
                      fusion_flops_model, sample_entities)
from .autodiff import count_flops
from .config import ExperimentConfig
from .fedcore import ClientState, MessageQueue, ServerState, local_train, log_line, run_round, \
    view_tokens
from .fusion import build_revealing_personalized, build_secure_personalized, fusion_report
from .gating import KeyRegistry, build_router, load_mlp, save_mlp
from .lora import Role
from .privacy import (ClientDataset, PiiDetector, build_dictionary, generate_corpus,
                      generate_documents, load_corpus, load_dictionary, save_corpus,
                      save_dictionary)
from .seeding import derive_seed
from .tinylm import TinyLM, load_model, pretrain_base, save_model
from .tokenizer import CharTokenizer

log = logging.getLogger(__name__)

STAGES = ("corpus", "pretrain", "init", "federate", "fusion", "gating", "evaluate")
TABLE_COLUMNS = ("client_id", "condition", "adapter_path", "inference_accuracy",
                 "extraction_precision", "extraction_recall", "ppl", "routing_accuracy")
VOLATILE = ("timings.json", "manifest.json")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def parse_stages(text: str | None) -> list[str]:
    if not text:
        return list(STAGES)
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in STAGES]
    if bad:
        raise ValueError(f"unknown stages {bad}; choose from {', '.join(STAGES)}")
    return [s for s in STAGES if s in names]


def key_id_for(client_id: int, j: int) -> str:
    return f"ORG{client_id:02d}-K{j}"


def key_secret(org_secret: str, key_id: str, generation: int) -> bytes:
    """Per-key secret derived from the organisation secret held in config/env."""
    msg = f"{key_id}#{generation}".encode("utf-8")
    return hmac.new(org_secret.encode("utf-8"), msg, hashlib.sha256).digest()


def fusion_queries(ds: ClientDataset, view: str, tok: CharTokenizer, ctx: int, n: int) -> list[list[int]]:
    docs = ds.masked_view if view == "masked" else ds.raw_view
    return [tok.encode_doc(d.text)[: ctx + 1] for d in docs[:n]]


def _json_dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


@dataclass
class Run:
    cfg: ExperimentConfig
    out: Path

    # -- paths
    def p(self, *parts) -> Path:
        path = self.out.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def tokenizer(self) -> CharTokenizer:
        return CharTokenizer(self.cfg.model.vocab_size)

    # -- loaders shared by later stages
    def dictionary(self) -> dict:
        return load_dictionary(self.p("corpus", "dictionary.json"))

    def clients(self) -> list[ClientDataset]:
        return load_corpus(self.p("corpus", "clients.jsonl"))

    def model(self) -> TinyLM:
        return load_model(self.p("checkpoints", "base.sglm"))

    def registry(self, cid: int) -> KeyRegistry:
        secret = self.cfg["gating"]["secret"]
        return KeyRegistry.load(self.p("gating", f"registry_{cid}.json"),
                                lambda k, g: key_secret(secret, k, g),
                                self.cfg.model.vocab_size, secret.encode("utf-8"))

    def _flops(self) -> dict:
        path = self.p("flops.json")
        return json.loads(path.read_text()) if path.exists() else {}

    def _record_flops(self, phase: str, counter, extra: dict | None = None) -> None:
        data = self._flops()
        data[phase] = {"flops": counter.flops, "matmuls": counter.matmuls, **(extra or {})}
        _json_dump(data, self.p("flops.json"))

    # ------------------------------------------------------------ stages

    def stage_corpus(self) -> None:
        c, seed = self.cfg["corpus"], self.cfg.seed
        dictionary = build_dictionary(c["dictionary_per_class"], derive_seed(seed, "dictionary"))
        clients = generate_corpus(self.cfg["federation"]["n_clients"], c["docs_per_client"],
                                  dictionary, derive_seed(seed, "corpus"), c["query_size"],
                                  min_per_class=self.cfg["attacks"]["candidate_pool_c"])
        public = generate_documents(self.cfg["pretrain"]["public_docs"], dictionary,
                                    np.random.default_rng(derive_seed(seed, "public")))
        save_dictionary(dictionary, self.p("corpus", "dictionary.json"))
        save_corpus(clients, self.p("corpus", "clients.jsonl"))
        with open(self.p("corpus", "public.jsonl"), "w") as f:
            for d in public:
                f.write(json.dumps({"text": d.text}) + "\n")

    def stage_pretrain(self) -> None:
        pc = self.cfg["pretrain"]
        tok = self.tokenizer
        ctx = self.cfg.model.context_len
        with open(self.p("corpus", "public.jsonl")) as f:
            seqs = [tok.encode_doc(json.loads(line)["text"])[: ctx + 1] for line in f if line.strip()]
        model = pretrain_base(self.cfg.model, seqs, pc["steps"], derive_seed(self.cfg.seed, "pretrain"),
                              lr=pc["lr"], batch_size=pc["batch_size"])
        save_model(model, self.p("checkpoints", "base.sglm"))

    def stage_init(self) -> None:
        """Global adapter init plus each client's local revealing adapter(s) on raw data."""
        cfg, seed = self.cfg, self.cfg.seed
        model, tok = self.model(), self.tokenizer
        lo = cfg["lora"]
        kw = dict(lora_alpha=cfg.lora_alpha, dropout_p=lo["dropout"],
                  allowed_ranks=None if lo["allow_custom_rank"] else lora.DEFAULT_RANKS)
        with count_flops() as counter:
            g = lora.init_adapter(model, lo["r"], Role.GLOBAL, derive_seed(seed, "global-init"),
                                  adapter_id="global", **kw)
            lora.save(g, self.p("checkpoints", "global_init.sgad"))
            records = []
            for ds in self.clients():
                raw = view_tokens(ds, "raw", tok, model.config.context_len)
                for j in range(lo["n_revealing"]):
                    start = lora.init_adapter(model, lo["r"], Role.REVEALING,
                                              derive_seed(seed, "revealing-init", ds.client_id, j),
                                              adapter_id=f"revealing-{ds.client_id}-{j}", **kw)
                    res = local_train(model, start, raw, cfg.revealing_optimizer,
                                      derive_seed(seed, "revealing-train", ds.client_id, j))
                    lora.save(res.adapter, self.p("checkpoints", f"revealing_{ds.client_id}_{j}.sgad"))
                    records.append({"client_id": ds.client_id, "adapter": j, "steps": res.steps,
                                    "loss_first": res.losses[0], "loss_last": res.losses[-1]})
        self.p("logs", "init.jsonl").write_text("".join(log_line(r) + "\n" for r in records))
        self._record_flops("initialization", counter)

    def stage_federate(self) -> dict:
        cfg, seed = self.cfg, self.cfg.seed
        model = self.model()
        fed = cfg["federation"]
        g = lora.load(self.p("checkpoints", "global_init.sgad"))
        server = ServerState.start(g, fed["m"], fed["eta_global"], fed["T"])
        clients = [ClientState(ds.client_id, ds) for ds in self.clients()]
        queue = MessageQueue()
        walls = []
        with count_flops() as counter, open(self.p("logs", "rounds.jsonl"), "w") as f:
            for _ in range(fed["T"]):
                server, record = run_round(server, clients, model, cfg.optimizer, cfg.defense,
                                           derive_seed(seed, "federate"), queue, self.tokenizer,
                                           jobs=cfg["runtime"]["jobs"])
                walls.append(record.pop("wall_time_s"))
                f.write(log_line(record) + "\n")
                f.flush()
                log.info("round %d done", record["t"])
        self.p("messages", "uploads.bin").write_bytes(queue.dump())
        lora.save(server.global_adapter, self.p("checkpoints", "global.sgad"))
        for c in clients:
            lora.save(c.secure_adapter, self.p("checkpoints", f"secure_{c.client_id}.sgad"))
        self._record_flops("optimization", counter)
        return {"round_wall_s": walls}

    def stage_fusion(self) -> None:
        cfg, seed = self.cfg, self.cfg.seed
        model, tok = self.model(), self.tokenizer
        fcfg = cfg.fusion
        g = lora.load(self.p("checkpoints", "global.sgad"))
        ctx = model.config.context_len
        evals, analytic = 0, 0
        with count_flops() as counter:
            for ds in self.clients():
                cid = ds.client_id
                # coefficients are fit on a slice of the client's own training views;
                # the held-out query documents stay reserved for evaluation
                qm = fusion_queries(ds, "masked", tok, ctx, fcfg.query_set_size)
                qr = fusion_queries(ds, "raw", tok, ctx, fcfg.query_set_size)
                sec = lora.load(self.p("checkpoints", f"secure_{cid}.sgad"))
                delta, res = build_secure_personalized(g, sec, qm, model, fcfg,
                                                       derive_seed(seed, "fusion", cid, "secure"))
                lora.save(delta, self.p("fusion", f"secure_{cid}.sgdd"))
                reports = [fusion_report(res, fcfg.psi, delta)]
                evals += res.evaluations
                analytic += fusion_flops_model(model.config, qm, res.evaluations)
                for j in range(cfg["lora"]["n_revealing"]):
                    rev = lora.load(self.p("checkpoints", f"revealing_{cid}_{j}.sgad"))
                    delta, res = build_revealing_personalized(
                        g, rev, qr, model, fcfg, derive_seed(seed, "fusion", cid, "revealing", j))
                    lora.save(delta, self.p("fusion", f"revealing_{cid}_{j}.sgdd"))
                    reports.append(fusion_report(res, fcfg.psi, delta))
                    evals += res.evaluations
                    analytic += fusion_flops_model(model.config, qr, res.evaluations)
                _json_dump(reports, self.p("fusion", f"report_{cid}.json"))
        self._record_flops("fusion", counter, {"evaluations": evals, "analytic_flops": analytic})

    def stage_gating(self) -> None:
        cfg, seed = self.cfg, self.cfg.seed
        model = self.model()
        gc = cfg["gating"]
        secret = gc["secret"]
        _json_dump(self.tokenizer.to_json(), self.p("gating", "public_tokenizer.json"))
        for ds in self.clients():
            cid = ds.client_id
            reg = KeyRegistry(model.config.embed_dim, model.config.vocab_size,
                              secret.encode("utf-8"), derive_seed(seed, "registry", cid))
            for j in range(cfg["lora"]["n_revealing"]):
                k = key_id_for(cid, j)
                reg.register_key(k, key_secret(secret, k, 0), j + 1)
            self._train_router(model, reg, cid)

    def _train_router(self, model: TinyLM, reg: KeyRegistry, cid: int) -> None:
        gc = self.cfg["gating"]
        res, _ = build_router(model, reg, gc["n_per_class"], gc["steps"], gc["hidden"],
                              gc["dropout"], gc["lr"], derive_seed(self.cfg.seed, "router", cid))
        reg.save(self.p("gating", f"registry_{cid}.json"))
        _json_dump(reg.local_vocab_json(), self.p("gating", f"local_vocab_{cid}.json"))
        save_mlp(res.mlp, self.p("gating", f"router_{cid}.sggt"))
        _json_dump({"initial_loss": res.initial_loss, "final_loss": res.final_loss,
                    "step_losses": res.step_losses, "loss_after": res.loss_after},
                   self.p("gating", f"train_{cid}.json"))

    def system(self, cid: int) -> ClientSystem:
        n_rev = self.cfg["lora"]["n_revealing"]
        adapters = [lora.load(self.p("fusion", f"secure_{cid}.sgdd"))]
        adapters += [lora.load(self.p("fusion", f"revealing_{cid}_{j}.sgdd")) for j in range(n_rev)]
        names = ["secure"] + (["revealing"] if n_rev == 1 else [f"revealing{j}" for j in range(n_rev)])
        return ClientSystem(cid, adapters, self.registry(cid),
                            load_mlp(self.p("gating", f"router_{cid}.sggt")), key_id_for(cid, 0),
                            self.cfg["gating"]["tau"], names)

    def stage_evaluate(self) -> None:
        cfg = self.cfg
        model, tok = self.model(), self.tokenizer
        dictionary = self.dictionary()
        detector = PiiDetector(dictionary)
        seed = derive_seed(cfg.seed, "evaluate")
        ext = cfg.extraction
        baseline = sample_entities(model, None, extraction_prompts(ext.n_samples, tok), detector,
                                   ext, derive_seed(seed, "extraction"), tok)
        reports = []
        for ds in self.clients():
            reports += [r.to_json() for r in evaluate_conditions(
                self.system(ds.client_id), model, ds, dictionary, detector, cfg.inference, ext,
                seed, baseline_entities=baseline)]
        _json_dump({"baseline_entities": sorted(baseline), "reports": reports},
                   self.p("attacks", "reports.json"))
        emit_tables(self.out)

    def rotate_key(self, cid: int, key_j: int = 0) -> dict:
        """Advance one key's generation and retrain only that client's router."""
        before = {p: _sha256(self.out / p) for p in _protected(self.out, cid)}
        reg = self.registry(cid)
        k = key_id_for(cid, key_j)
        gen = reg.keys[k].generation + 1
        reg.rotate_key(k, key_secret(self.cfg["gating"]["secret"], k, gen))
        self._train_router(self.model(), reg, cid)
        after = {p: _sha256(self.out / p) for p in before}
        changed = sorted(p for p in before if before[p] != after[p])
        if changed:
            raise RuntimeError(f"key rotation modified protected artifacts: {changed}")
        write_manifest(self.out)
        return {"client_id": cid, "key_id": k, "generation": gen}


def _protected(out: Path, cid: int) -> list[str]:
    """Model and adapter files that key rotation must leave untouched."""
    pats = ["checkpoints/*.sglm", "checkpoints/*.sgad", f"fusion/*_{cid}*.sgdd"]
    return sorted(str(p.relative_to(out)) for pat in pats for p in out.glob(pat))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file())
    entries = {str(p.relative_to(out)): _sha256(p) for p in files
               if str(p.relative_to(out)) not in VOLATILE}
    manifest = {"artifacts": entries, "volatile": [v for v in VOLATILE if v != "manifest.json"]}
    _json_dump(manifest, out / "manifest.json")
    return manifest


def emit_tables(out) -> list[dict]:
    """One row per (client, condition) as CSV and JSON under ``tables/``."""
    out = Path(out)
    path = out / "attacks" / "reports.json"
    if not path.exists():
        raise FileNotFoundError(f"attack reports missing ({path}); run the 'evaluate' stage")
    reports = json.loads(path.read_text())["reports"]
    rows = [{c: r[c] for c in TABLE_COLUMNS} for r in
            sorted(reports, key=lambda r: (r["client_id"], CONDITIONS.index(r["condition"])))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in TABLE_COLUMNS])
    (out / "tables").mkdir(parents=True, exist_ok=True)
    (out / "tables" / "summary.csv").write_text(buf.getvalue())
    _json_dump({"columns": list(TABLE_COLUMNS), "rows": rows}, out / "tables" / "summary.json")
    return rows


def read_table_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["client_id"] = int(r["client_id"])
        for c in TABLE_COLUMNS[3:]:
            r[c] = float(r[c])
    return rows


def run_experiment(cfg: ExperimentConfig, out, stages=None) -> Path:
    """Run the requested stages in order; always rewrites timings and the manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out)
    stages = parse_stages(stages) if isinstance(stages, (str, type(None))) else list(stages)
    _json_dump(cfg.to_dict(), out / "config.json")
    timings = {}
    tpath = out / "timings.json"
    if tpath.exists():
        timings = json.loads(tpath.read_text())
    try:
        for stage in stages:
            t0 = time.perf_counter()
            log.info("stage %s", stage)
            try:
                extra = getattr(run, f"stage_{stage}")()
            except Exception as e:
                raise StageError(stage, e) from e
            timings[stage] = {"wall_s": time.perf_counter() - t0, **(extra or {})}
    finally:
        _json_dump(timings, tpath)
        write_manifest(out)
    return out


# ---------------------------------------------------------------- audits


def audit_uploads(blob: bytes, pii_values, tensors, window: int = 16) -> dict:
    """Count PII strings and revealing-tensor byte windows found in the upload stream.

    Every aligned ``window``-byte slice of every tensor (as f32) is looked for
    at every byte offset of ``blob``.
    """
    pii_hits = sorted(v for v in pii_values if v.encode("utf-8") in blob)
    needles = set()
    for arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        needles.update(raw[i:i + window] for i in range(0, len(raw) - window + 1, 4))
    found = set()
    if needles:
        for i in range(len(blob) - window + 1):
            w = blob[i:i + window]
            if w in needles:
                found.add(w)
    return {"pii_hits": pii_hits, "tensor_windows_found": len(found)}


def split_messages(blob: bytes) -> list[tuple[int, int, bytes]]:
    out, pos = [], 0
    while pos < len(blob):
        t, sender, n = np.frombuffer(blob[pos:pos + 12], dtype="<u4").tolist()
        pos += 12
        out.append((t, sender, blob[pos:pos + n]))
        pos += n
    return out
