import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from gatedfl.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from gatedfl.config import DEFAULTS, ConfigError, validate_config
from gatedfl.pipeline import TABLE_COLUMNS, emit_tables, parse_stages, read_table_csv

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_FILE = ROOT / "configs" / "default.yaml"

TINY = {
    "model": {"embed_dim": 16, "n_layers": 1},
    "pretrain": {"steps": 10, "public_docs": 20},
    "corpus": {"docs_per_client": 6, "query_size": 2, "dictionary_per_class": 60},
    "federation": {"n_clients": 10, "T": 2},
    "revealing": {"epochs": 2},
    "fusion": {"query_set_size": 2, "budget": 12},
    "gating": {"n_per_class": 20, "steps": 10},
    "attacks": {"candidate_pool_c": 10, "n_contexts": 5, "extraction_samples": 2,
                "extraction_max_new": 10},
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture(scope="module")
def tiny_run(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    res = CliRunner().invoke(main, ["run", "--config", str(tiny_cfg), "--out", str(out)])
    assert res.exit_code == EXIT_OK, res.output
    return out


def test_default_file_parses_and_matches_builtins(runner):
    cfg = validate_config(DEFAULT_FILE, environ={})
    assert cfg.to_dict() == validate_config(None, environ={}).to_dict()
    assert yaml.safe_load(DEFAULT_FILE.read_text()) == DEFAULTS
    res = runner.invoke(main, ["validate", str(DEFAULT_FILE)])
    assert res.exit_code == EXIT_OK and json.loads(res.output)["federation"]["m"] == 0.5


def test_rank_outside_default_set_is_rejected(runner):
    res = runner.invoke(main, ["validate", str(DEFAULT_FILE), "--set", "lora.r=5"])
    assert res.exit_code == EXIT_INVALID and "lora.r" in res.output
    cfg = validate_config(None, {}, {"lora.r": 5, "lora.allow_custom_rank": True})
    assert cfg["lora"]["r"] == 5


def test_momentum_bound_message():
    with pytest.raises(ConfigError) as e:
        validate_config(None, {}, {"federation.m": 1.2})
    assert "m must be in [0,1)" in e.value.errors


def test_errors_are_aggregated_and_unknown_keys_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("federation:\n  m: 1.2\n  rounds: 3\nlora:\n  r: 5\n")
    with pytest.raises(ConfigError) as e:
        validate_config(path, {})
    assert any("rounds" in err for err in e.value.errors)
    with pytest.raises(ConfigError) as e:
        validate_config(None, {}, {"federation.m": 1.2, "lora.r": 5})
    assert len(e.value.errors) == 2


def test_override_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("federation:\n  T: 7\n")
    assert validate_config(path, {})["federation"]["T"] == 7
    env = {"GATEDFL_FEDERATION__T": "9"}
    assert validate_config(path, env)["federation"]["T"] == 9
    assert validate_config(path, env, {"federation.T": 11})["federation"]["T"] == 11


def test_missing_file_and_bad_stage_are_invalid(runner, tmp_path):
    res = runner.invoke(main, ["validate", str(tmp_path / "nope.yaml")])
    assert res.exit_code != EXIT_OK
    res = runner.invoke(main, ["run", "--out", str(tmp_path / "o"), "--stages", "corpus,bake"])
    assert res.exit_code == EXIT_INVALID
    assert parse_stages("pretrain,corpus") == ["corpus", "pretrain"]


def test_stage_subset_runs_only_those(runner, tiny_cfg, tmp_path):
    out = tmp_path / "o"
    res = runner.invoke(main, ["run", "--config", str(tiny_cfg), "--out", str(out),
                               "--stages", "corpus,pretrain"])
    assert res.exit_code == EXIT_OK, res.output
    assert (out / "corpus" / "clients.jsonl").exists() and (out / "checkpoints" / "base.sglm").exists()
    assert not (out / "logs").exists() and not (out / "tables").exists()
    assert set(json.loads((out / "timings.json").read_text())) == {"corpus", "pretrain"}


def test_stage_failure_is_a_runtime_error(runner, tiny_cfg, tmp_path):
    res = runner.invoke(main, ["run", "--config", str(tiny_cfg), "--out", str(tmp_path / "o"),
                               "--stages", "federate"])
    assert res.exit_code == EXIT_RUNTIME and "federate" in res.output


def test_tables_without_reports_name_the_stage(runner, tmp_path):
    res = runner.invoke(main, ["tables", "--out", str(tmp_path)])
    assert res.exit_code == EXIT_RUNTIME and "evaluate" in res.output


def test_full_tiny_run_tables(tiny_run):
    rows = read_table_csv(tiny_run / "tables" / "summary.csv")
    data = json.loads((tiny_run / "tables" / "summary.json").read_text())
    assert len(rows) == 30 and data["columns"] == list(TABLE_COLUMNS)
    assert rows == data["rows"]
    manifest = json.loads((tiny_run / "manifest.json").read_text())
    assert "tables/summary.csv" in manifest["artifacts"] and "timings.json" not in manifest["artifacts"]


def test_tables_verb_rebuilds_identically(runner, tiny_run):
    before = (tiny_run / "tables" / "summary.csv").read_bytes()
    res = runner.invoke(main, ["tables", "--out", str(tiny_run)])
    assert res.exit_code == EXIT_OK
    assert (tiny_run / "tables" / "summary.csv").read_bytes() == before
    assert emit_tables(tiny_run) == json.loads((tiny_run / "tables" / "summary.json").read_text())["rows"]


def test_rotate_key_touches_only_the_router(runner, tiny_cfg, tiny_run):
    def digest(p):
        return (tiny_run / p).read_bytes()
    frozen = ["checkpoints/base.sglm", "checkpoints/global.sgad", "fusion/revealing_3_0.sgdd"]
    before = {p: digest(p) for p in frozen}
    router_before = digest("gating/router_3.sggt")
    res = runner.invoke(main, ["rotate-key", "--config", str(tiny_cfg), "--out", str(tiny_run),
                               "--client", "3"])
    assert res.exit_code == EXIT_OK, res.output
    assert json.loads(res.output)["generation"] == 1
    assert all(digest(p) == before[p] for p in frozen)
    assert digest("gating/router_3.sggt") != router_before
    reg = json.loads(digest("gating/registry_3.json"))
    assert reg["keys"]["ORG03-K0"]["generation"] == 1
