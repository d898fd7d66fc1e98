"""Command-line harness: run declarative experiments end to end.

Usage::

    fastslow <kind> --config <path> [--seed N] [--out DIR] [--threads N]

Kinds: simulate-multiscale, estimate-coefficients, simulate-sde, converge,
eof, centering-check.  On failure the error category is printed as JSON on
stderr; exit codes: 0 success, 2 invalid config, 3 any other tool error,
1 unexpected internal error.
"""

from __future__ import annotations

import json
import sys

import click

from .config import EXPERIMENT_KINDS, load_config
from .errors import ConfigError, ToolError
from .experiments import run_experiment


@click.command(name="fastslow")
@click.argument("kind", type=click.Choice(EXPERIMENT_KINDS))
@click.option("--config", "config_path", required=True, type=click.Path(), help="YAML experiment config.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Output directory (default out/<kind>).")
@click.option("--threads", type=int, default=1, show_default=True, help="Worker threads for ensemble chunks.")
def main(kind, config_path, seed, out_dir, threads):
    """Run one experiment KIND from a config file and write its reports."""
    try:
        cfg = load_config(config_path)
        out = out_dir or cfg.get("output", {}).get("dir") or f"out/{kind}"
        summary = run_experiment(kind, cfg, out, seed=seed, threads=threads)
    except ToolError as exc:
        payload = {
            "error": {
                "category": exc.category,
                "message": str(exc),
                "provenance": {k: repr(v) for k, v in exc.provenance.items()},
            }
        }
        click.echo(json.dumps(payload, sort_keys=True), err=True)
        sys.exit(2 if isinstance(exc, ConfigError) else 3)
    click.echo(json.dumps({"ok": True, "kind": kind, "out": summary.get("out")}, sort_keys=True))


if __name__ == "__main__":
    main()
