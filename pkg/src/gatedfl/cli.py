"""Command-line entry point: ``gatedfl run|validate|attack|tables|rotate-key``.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import ConfigError, ExperimentConfig, parse_set, validate_config

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _load(config_path, sets) -> ExperimentConfig:
    try:
        return validate_config(config_path, None, parse_set(sets))
    except ConfigError as e:
        for err in e.errors:
            click.echo(f"config error: {err}", err=True)
        sys.exit(EXIT_INVALID)


def _runtime(fn):
    try:
        return fn()
    except SystemExit:
        raise
    except Exception as e:  # noqa: BLE001 - report and map to the runtime exit code
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_RUNTIME)


config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                          default=None, help="YAML config file (defaults are built in).")
set_opt = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                       help="Override one field, e.g. --set federation.T=5.")
out_opt = click.option("--out", "out", type=click.Path(file_okay=False), required=True,
                       help="Run directory.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log stage progress.")
def main(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")


@main.command()
@config_opt
@set_opt
@out_opt
@click.option("--stages", default=None, help="Comma-separated subset of stages to run.")
@click.option("--jobs", type=int, default=None, help="Worker threads for client training.")
def run(config_path, sets, out, stages, jobs):
    """Run the experiment pipeline."""
    from .pipeline import StageError, parse_stages, run_experiment

    sets = list(sets) + ([f"runtime.jobs={jobs}"] if jobs is not None else [])
    cfg = _load(config_path, sets)
    try:
        chosen = parse_stages(stages)
    except ValueError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_INVALID)

    def go():
        try:
            run_experiment(cfg, out, chosen)
        except StageError as e:
            raise RuntimeError(str(e)) from e

    _runtime(go)
    click.echo(f"wrote {out}")


@main.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@set_opt
def validate(config_path, sets):
    """Check a config file and print the resolved values."""
    cfg = _load(config_path, sets)
    click.echo(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


@main.command()
@config_opt
@set_opt
@out_opt
def attack(config_path, sets, out):
    """Re-run the attack evaluation on an existing run directory."""
    from .pipeline import run_experiment

    cfg = _load(config_path, sets)
    _runtime(lambda: run_experiment(cfg, out, ["evaluate"]))
    click.echo(Path(out, "tables", "summary.csv").read_text(), nl=False)


@main.command()
@out_opt
def tables(out):
    """Rebuild the summary tables from stored attack reports."""
    from .pipeline import emit_tables, write_manifest

    def go():
        emit_tables(out)
        write_manifest(Path(out))

    _runtime(go)
    click.echo(Path(out, "tables", "summary.csv").read_text(), nl=False)


@main.command("rotate-key")
@config_opt
@set_opt
@out_opt
@click.option("--client", "client_id", type=int, required=True)
@click.option("--key-index", type=int, default=0, show_default=True)
def rotate_key(config_path, sets, out, client_id, key_index):
    """Rotate one access key and retrain that client's router only."""
    from .pipeline import Run

    cfg = _load(config_path, sets)
    info = _runtime(lambda: Run(cfg, Path(out)).rotate_key(client_id, key_index))
    click.echo(json.dumps(info, sort_keys=True))


if __name__ == "__main__":
    main()
