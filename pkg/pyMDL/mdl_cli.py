"""
Command-line entry point.

::

    pymdl plan --arch toyT --strategy bottom_specific --fraction 0.2 --out plans/
    pymdl train --config desk.json --out runs/one --set trainer.steps=50
    pymdl eval --checkpoint runs/one/checkpoint --config desk.json
    pymdl matrix --config desk.json --out runs/desk --workers 4
    pymdl report --results runs/desk/results.csv --out runs/desk/report

Exit codes: 0 success, 1 invalid input, 2 partial matrix failure, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime
import json
import logging
import platform
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from pyMDL.mdl_archspec import count_conv_params
from pyMDL.mdl_bench import (
    ExperimentConfig,
    cell_label,
    load_config,
    matrix_cells,
    read_results,
    run_matrix,
    train_cell,
)
from pyMDL.mdl_checkpoint import load_checkpoint, save_checkpoint
from pyMDL.mdl_data import build_datasets
from pyMDL.mdl_eval import evaluate
from pyMDL.mdl_planner import STRATEGIES, build_plan, layer_summary, plan_digest, save_plan
from pyMDL.mdl_report import REPORT_FORMATS, emit_report
from pyMDL.mdl_zoo import resolve_architecture

__all__ = ["CommandInvocation", "build_parser", "main"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_PARTIAL = 2
EXIT_RUNTIME = 3

SUBCOMMANDS = ("plan", "train", "eval", "matrix", "report")

MANIFEST_FILE = "manifest.json"


@dataclass
class CommandInvocation:
    subcommand: str
    config: Path | None = None
    out: Path = Path(".")
    overrides: list = field(default_factory=list)
    verbosity: int = logging.INFO

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ValueError('Invalid value for "subcommand": {}'.format(self.subcommand))

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> CommandInvocation:
        verbosity = logging.INFO
        if args.verbose:
            verbosity = logging.DEBUG
        elif args.quiet:
            verbosity = logging.WARNING
        return cls(
            subcommand=args.command,
            config=Path(args.config) if getattr(args, "config", None) else None,
            out=Path(args.out),
            overrides=list(getattr(args, "overrides", None) or []),
            verbosity=verbosity,
        )

    @property
    def progress(self) -> bool:
        return self.verbosity <= logging.INFO

    def load(self) -> ExperimentConfig:
        if self.config is None:
            raise ValueError(f"{self.subcommand} needs --config")
        return load_config(self.config, self.overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pymdl",
        description="Multi-domain CNNs with filter-granular hard parameter sharing",
    )
    common = argparse.ArgumentParser(add_help=False)
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings and errors only")
    common.add_argument("--out", default=".", help="Output directory")

    configured = argparse.ArgumentParser(add_help=False)
    configured.add_argument("--config", help="Experiment config (JSON)")
    configured.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config entry, e.g. trainer.lr=0.1 (repeatable)",
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="Build a sharing plan")
    p.add_argument("--arch", required=True, help="Built-in architecture name or JSON file")
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.add_argument("--fraction", required=True, type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in-channels", type=int, default=None)

    p = sub.add_parser("train", parents=[common, configured], help="Train one cell")
    p.add_argument("--arch", help="Architecture (default: first of the config)")
    p.add_argument("--strategy", choices=STRATEGIES, help="Strategy (default: first of the config)")
    p.add_argument("--fraction", type=float, help="Fraction (default: first of the config)")
    p.add_argument("--seed", type=int, help="Seed (default: first of the config)")
    p.add_argument("--omit-dead", action="store_true", help="Leave dead shared filters out of the checkpoint")

    p = sub.add_parser("eval", parents=[common, configured], help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="Checkpoint directory")

    p = sub.add_parser("matrix", parents=[common, configured], help="Run an experiment matrix")
    p.add_argument("--workers", type=int, help="Parallel cells (overrides the config)")
    p.add_argument("--format", choices=sorted(REPORT_FORMATS), default="csv")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("report", parents=[common], help="Report stored results")
    p.add_argument("--results", required=True, help="Results file (.csv or .tsv)")
    p.add_argument("--format", choices=sorted(REPORT_FORMATS), default="csv")
    p.add_argument("--fraction", type=float, help="Budget fraction of the summary table")
    p.add_argument("--tolerance", type=float, default=0.01, help="Accuracy tolerance of the competitive-fraction finding")
    p.add_argument("--no-plots", action="store_true")
    return parser


def _versions() -> dict:
    from pyMDL import __version__

    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "pyMDL": __version__,
    }


def _write_json(path: Path, document: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
    return path


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


################################################################################


def cmd_plan(args, inv: CommandInvocation) -> int:
    arch = resolve_architecture(args.arch, args.in_channels)
    plan = build_plan(arch, args.strategy, args.fraction, args.seed)
    path = save_plan(plan, inv.out / f"plan_{arch.name}_{args.strategy}_{args.fraction:g}.json")
    print(f"{arch.name}: {args.strategy} at {args.fraction:g} of {count_conv_params(arch)} conv parameters")
    print(f"achieved {plan.achieved_params} / target {plan.target_params:g}")
    for row in layer_summary(plan, arch):
        selected = ",".join(str(i) for i in plan.selected(row["layer_id"]))
        print(
            f"  L{row['layer_id']}: {row['selected']}/{row['filters']} filters, "
            f"{row['params']} params" + (f" {{{selected}}}" if selected else "")
        )
    print(f"wrote {path}")
    return EXIT_OK


def _pick(values, chosen, what):
    if chosen is None:
        return values[0]
    if chosen not in values and what != "seed":
        logger.warning("%s %r is not in the config", what, chosen)
    return chosen


def cmd_train(args, inv: CommandInvocation) -> int:
    config = inv.load()
    cell = {
        "architecture": _pick(config.architectures, args.arch, "architecture"),
        "domain_set": config.resolved_domain_sets()[0],
        "strategy": _pick(config.strategies, args.strategy, "strategy"),
        "fraction": float(_pick(config.fractions, args.fraction, "fraction")),
        "seed": _pick(config.seeds, args.seed, "seed"),
    }
    _write_json(
        inv.out / MANIFEST_FILE,
        {
            "command": "train",
            "cell": cell,
            "config_digest": config.digest(),
            "started_at": _now(),
            "status": "running",
            "versions": _versions(),
        },
    )
    with _failed_on_error(inv.out):
        datasets = build_datasets(config.domains, config.image_size, config.in_channels)
        model, rows, history = train_cell(config, cell, datasets, inv.progress)

        plan_path = save_plan(model.plan, inv.out / "plan.json")
        checkpoint = save_checkpoint(
            model,
            inv.out / "checkpoint",
            omit_dead=args.omit_dead,
            extra={"cell": cell, "config_digest": config.digest()},
        )
        history.write(inv.out / "history.csv")
    for row in rows:
        print(f"{row.domain}: {row.val_accuracy:.4f}")
    _update_manifest(
        inv.out,
        status="completed",
        finished_at=_now(),
        accuracy={row.domain: row.val_accuracy for row in rows},
        plan=str(plan_path.name),
        checkpoint=str(checkpoint.relative_to(inv.out)),
    )
    return EXIT_OK


def cmd_eval(args, inv: CommandInvocation) -> int:
    config = inv.load()
    model = load_checkpoint(args.checkpoint)
    sources = [d for d in config.domains if d.domain_id in model.domain_ids]
    missing = set(model.domain_ids) - {d.domain_id for d in sources}
    if missing:
        raise ValueError(f"Config has no data for domains {sorted(missing)}")
    datasets = build_datasets(sources, config.image_size, config.in_channels)
    accuracy = evaluate(model, datasets, config.trainer.eval_batch_size)
    for domain_id, value in accuracy.items():
        print(f"{domain_id}: {value:.4f}")
    _write_json(
        inv.out / "eval.json",
        {
            "checkpoint": str(args.checkpoint),
            "plan_digest": plan_digest(model.plan),
            "accuracy": accuracy,
        },
    )
    return EXIT_OK


def _update_manifest(out: Path, **entries) -> Path:
    path = out / MANIFEST_FILE
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update(entries)
    return _write_json(path, manifest)


@contextlib.contextmanager
def _failed_on_error(out: Path):
    """Mark the run manifest failed when the wrapped work raises."""
    try:
        yield
    except Exception as exc:
        _update_manifest(out, status="failed", finished_at=_now(), error=f"{type(exc).__name__}: {exc}")
        raise


def cmd_matrix(args, inv: CommandInvocation) -> int:
    config = inv.load()
    if args.workers is not None:
        config = replace(config, workers=args.workers).validate()
    cells = matrix_cells(config)
    _write_json(
        inv.out / MANIFEST_FILE,
        {
            "command": "matrix",
            "config": config.to_dict(),
            "config_digest": config.digest(),
            "seeds": list(config.seeds),
            "cells": [cell_label(c) for c in cells],
            "started_at": _now(),
            "status": "running",
            "versions": _versions(),
        },
    )
    with _failed_on_error(inv.out):
        table = run_matrix(config, history_dir=inv.out / "histories", progress=inv.progress)
        if not len(table):
            _update_manifest(inv.out, status="failed", finished_at=_now(), failures=_failures(table))
            logger.error("Every cell failed")
            return EXIT_PARTIAL

        artifacts = emit_report(
            table,
            inv.out,
            format=args.format,
            preferred=config.report_fraction,
            plots=not args.no_plots,
        )
    status = "partial" if table.failures else "completed"
    print(artifacts.frame.to_string(index=False))
    _update_manifest(
        inv.out,
        status=status,
        finished_at=_now(),
        rows=len(table),
        failures=_failures(table),
        outputs=sorted(
            str(p.relative_to(inv.out))
            for p in [artifacts.results_path, artifacts.table_path, artifacts.findings_path, *artifacts.plot_paths]
        ),
    )
    if table.failures:
        for failure in table.failures:
            print(f"FAILED cell {failure.index} ({cell_label(failure.cell)}): {failure.error}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _failures(table) -> list:
    return [{"index": f.index, "cell": cell_label(f.cell), "error": f.error} for f in table.failures]


def cmd_report(args, inv: CommandInvocation) -> int:
    path = Path(args.results)
    table = read_results(path, sep="\t" if path.suffix == ".tsv" else ",")
    if not len(table):
        raise ValueError(f"{path} holds no results")
    artifacts = emit_report(
        table,
        inv.out,
        format=args.format,
        fraction=args.fraction,
        plots=not args.no_plots,
        tolerance=args.tolerance,
    )
    print(artifacts.frame.to_string(index=False))
    for row in artifacts.findings["directional_gap"]:
        print(f"{row['architecture']} fraction {row['fraction']:g}: bottom - top = {row['mean_gap']:+.4f}")
    return EXIT_OK


COMMANDS = {
    "plan": cmd_plan,
    "train": cmd_train,
    "eval": cmd_eval,
    "matrix": cmd_matrix,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    inv = CommandInvocation.from_args(args)
    logging.basicConfig(
        level=inv.verbosity,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[inv.subcommand](args, inv)
    except (ValueError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except Exception:
        logger.exception("%s failed", inv.subcommand)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
