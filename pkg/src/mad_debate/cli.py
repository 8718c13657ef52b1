"""Command-line driver: ``mad-debate run|ablate|corrupt|regret-sim``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence

from . import pipeline
from .agents import DegenerateTrain
from .config import ConfigError, RunConfig, load_config, with_seed
from .conformal import EmptyCalibration
from .core import dumps_report, write_traces
from .ingest import EmptyTrain, InsufficientRows, KindColumnMismatch, ParseError, SchemaMismatch, write_split_sidecar
from .metrics import NoPositives, SingleClass
from .normalize import EmptyScores

logger = logging.getLogger("mad_debate")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DATA_ERRORS = (
    ParseError, SchemaMismatch, EmptyTrain, InsufficientRows, KindColumnMismatch, DegenerateTrain,
    EmptyCalibration, EmptyScores, SingleClass, NoPositives,
)
DATA_STAGES = ("load", "split", "preprocess")


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _write_json(path: Path, obj) -> None:
    path.write_text(dumps_report(obj), encoding="utf-8")


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(cfg: RunConfig, workers: int = 1) -> pipeline.RunArtifacts:
    """Full pipeline on the test split; writes metrics, ledger, traces and scores."""
    out = _outdir(cfg)
    art = pipeline.run(cfg, workers)
    _write_json(out / "metrics.json", art.metrics)
    _write_json(out / "ledger.json", art.ledger)
    if cfg.write_traces:
        write_traces(out / "traces.ndjson", art.evaluation.stream.traces())
    if cfg.split.export:
        write_split_sidecar(out / "split.csv", art.fitted.table)
    header = ("row_id", "score") if not cfg.conformal.enabled else ("row_id", "score", "p_value", "flag")
    _write_csv(out / "scores.csv", header, art.score_rows)
    m = art.metrics
    logger.info("run done: roc_auc=%.4f pr_auc=%.4f ece=%.4f", m["roc_auc"], m["pr_auc"], m["ece"])
    return art


def cmd_ablate(cfg: RunConfig, workers: int = 1) -> tuple[list[dict], dict]:
    out = _outdir(cfg)
    rows, best = pipeline.ablate(cfg, workers)
    cols = pipeline.ABLATION_COLUMNS
    _write_csv(out / "ablation.csv", cols, ([r[c] for c in cols] for r in rows))
    _write_json(out / "ablation_selected.json", best)
    logger.info("ablation: %d configs, selected %s", len(rows), best)
    return rows, best


def cmd_corrupt(cfg: RunConfig, workers: int = 1) -> list[dict]:
    out = _outdir(cfg)
    rows = pipeline.corruption_sweep(cfg, workers)
    cols = pipeline.CORRUPTION_COLUMNS
    _write_csv(out / "corruption.csv", cols, ([r[c] for c in cols] for r in rows))
    return rows


def cmd_regret_sim(cfg: RunConfig, workers: int = 1) -> list[dict]:
    """Writes the summary and curves before checking, so a violation leaves evidence on disk."""
    out = _outdir(cfg)
    rows, curves = pipeline.regret_sim(cfg)
    cols = pipeline.REGRET_COLUMNS
    _write_csv(out / "regret.csv", cols, ([r[c] for c in cols] for r in rows))
    _write_csv(out / "regret_curves.csv", ("generator", "seed", "t", "regret", "bound"), curves)
    pipeline.check_regret_rows(rows)
    logger.info("regret bound held in %d runs", len(rows))
    return rows


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "corrupt": cmd_corrupt, "regret-sim": cmd_regret_sim}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mad-debate", description="Debate-weighted anomaly detection.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="config JSON path, or bundled:<name>")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--workers", type=int, default=1, help="worker threads for pool fitting")
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DATA_ERRORS) or isinstance(exc, OSError):
        return EXIT_DATA
    if getattr(exc, "stage", None) in DATA_STAGES and isinstance(exc, (ValueError, TypeError)):
        return EXIT_DATA
    return EXIT_NUMERIC


def _setup_logging() -> None:
    level = os.environ.get("MAD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        if args.workers < 1:
            raise ConfigError("--workers", "must be at least 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed", "must be nonnegative")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = with_seed(cfg, args.seed)
        if args.out is not None:
            cfg = replace(cfg, output_dir=args.out)
        t0 = time.perf_counter()
        COMMANDS[args.command](cfg, args.workers)
        logger.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        where = getattr(exc, "stage", None)
        tag = f"[{where}] " if where else ""
        print(f"mad-debate {args.command}: {tag}{type(exc).__name__}: {exc}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
