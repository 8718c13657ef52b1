"""End-to-end orchestration behind the CLI subcommands."""

from __future__ import annotations

import contextlib
import itertools
import logging
import math
import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import conformal as cf
from .agents import AgentPool, fit_pool
from .config import RunConfig
from .coordinator import BoundViolation, MessageBatch, StreamResult, build_messages, regret_check, run_batch, simulate_regret
from .coordinator import LOSS_GENERATORS
from .core import DatasetTable, MadConfig
from .datasets import load_bundled
from .ingest import (
    CorruptionSpec,
    PreprocessModel,
    SliceSpec,
    apply_preprocess,
    corrupt,
    fit_preprocess,
    load_csv,
    make_slices,
    split,
)
from .metrics import NoUsableSlices, detection_report, disagreement, roc_auc, pr_auc, slice_gap
from .normalize import fit_normalizers

logger = logging.getLogger(__name__)


@contextlib.contextmanager
def stage(name: str):
    """Tag any exception escaping the block with the pipeline stage it came from."""
    try:
        yield
    except Exception as exc:
        if not hasattr(exc, "stage"):
            exc.stage = name
        raise


@dataclass(frozen=True, eq=False)
class FittedPipeline:
    config: RunConfig
    table: DatasetTable
    model: PreprocessModel
    pool: AgentPool
    normalizers: tuple
    warm_weights: np.ndarray | None = None

    def features(self, view: DatasetTable) -> np.ndarray:
        return apply_preprocess(self.model, view)[0]


@dataclass(eq=False)
class Evaluation:
    view: DatasetTable
    batch: MessageBatch
    stream: StreamResult

    @property
    def scores(self) -> np.ndarray:
        return self.stream.scores


def load_dataset(cfg: RunConfig) -> DatasetTable:
    if cfg.data.source == "csv":
        return load_csv(cfg.data.path, label_column=cfg.data.label_column, categorical=cfg.data.categorical)
    return load_bundled(cfg.data.name, seed=cfg.seed, **cfg.data.params)


def fit_pipeline(cfg: RunConfig, workers: int = 1, table: DatasetTable | None = None) -> FittedPipeline:
    """Load, split, preprocess, and fit the pool and normalizers on train rows."""
    t0 = time.perf_counter()
    with stage("load"):
        table = load_dataset(cfg) if table is None else table
    with stage("split"):
        stratify = cfg.split.stratify and table.labels is not None
        table = split(table, cfg.split.fractions, cfg.seed, stratify)
    with stage("preprocess"):
        train = table.view("train")
        if cfg.data.protocol == "semi_supervised" and train.labels is not None:
            train = train.take(np.flatnonzero(train.labels == 0))
        model = fit_preprocess(train, cfg.add_missing_indicators)
        X_train = apply_preprocess(model, train)[0]
        val = table.view("validation")
        X_val = apply_preprocess(model, val)[0] if val.rows else None
    with stage("fit_pool"):
        labels = train.labels if cfg.data.protocol == "supervised" else None
        pool = fit_pool(X_train, labels, cfg.pool, cfg.seed, X_val=X_val, workers=workers)
    with stage("fit_normalizers"):
        normalizers = fit_normalizers(cfg.normalizer, pool.train_scores)
    fp = FittedPipeline(cfg, table, model, pool, normalizers)

    if cfg.mode == "persistent_weights" and cfg.mad.supervised and val.rows and val.labels is not None:
        # labelled warm-up stream; the test stream continues from its weights
        batch = build_messages(pool, normalizers, X_val, cfg.mad, val.row_ids)
        warm = run_batch(batch, cfg.mad, "persistent_weights", labels=val.labels.astype(np.float64))
        fp = replace(fp, warm_weights=warm.result.weights[-1, -1])
    logger.info("pipeline fitted in %.2fs (d=%d, N=%d)", time.perf_counter() - t0, pool.d, pool.N)
    return fp


def score_view(fp: FittedPipeline, view: DatasetTable, mad: MadConfig | None = None, mode: str | None = None,
               batch: MessageBatch | None = None) -> Evaluation:
    mad = mad or fp.config.mad
    mode = mode or fp.config.mode
    if batch is None:
        batch = build_messages(fp.pool, fp.normalizers, fp.features(view), mad, view.row_ids)
    start = fp.warm_weights if mode == "persistent_weights" else None
    result = run_batch(batch, mad, mode, start=start)
    return Evaluation(view, batch, result)


def _slices(fp: FittedPipeline, view: DatasetTable):
    """Configured slices, or quartiles of the first numeric column that yields two usable slices."""
    train = fp.table.view("train")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if fp.config.metrics.slices:
            return [sl for spec in fp.config.metrics.slices for sl in make_slices(view, spec, train)]
        y = view.labels.astype(bool)
        for col in (c.name for c in view.columns if c.kind == "numeric"):
            slices = make_slices(view, SliceSpec("default", "feature_quantile", col, 4), train)
            usable = sum(1 for sl in slices if 0 < y[sl.rows].sum() < len(sl.rows))
            if usable >= 2:
                return slices
    return []


def metrics_report(fp: FittedPipeline, ev: Evaluation) -> dict:
    """Metrics JSON body for one scored view (labels required)."""
    cfg = fp.config.metrics
    y = ev.view.labels
    scores = ev.scores
    report = detection_report(scores, y, cfg.fpr_budget, cfg.ece_bins)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            gap, per_slice = slice_gap(scores, y, _slices(fp, ev.view))
        except NoUsableSlices:
            gap, per_slice = None, {}
    report["gap"] = gap
    report["slices"] = per_slice
    if ev.batch.N >= 2:
        _, summary = disagreement(ev.batch.scores)
    else:
        summary = {"median": 0.0, "p90": 0.0}
    report["disagreement"] = summary
    mean_scores = ev.batch.scores.mean(axis=1)
    report["baselines"] = {
        "mean_ensemble": detection_report(mean_scores, y, cfg.fpr_budget, cfg.ece_bins),
        "agents": {
            name: {"pr_auc": pr_auc(ev.batch.scores[:, i], y), "roc_auc": roc_auc(ev.batch.scores[:, i], y)}
            for i, name in enumerate(fp.pool.names)
        },
    }
    return report


@dataclass(eq=False)
class RunArtifacts:
    fitted: FittedPipeline
    evaluation: Evaluation
    metrics: dict
    ledger: dict
    score_rows: list[tuple]


def run(cfg: RunConfig, workers: int = 1) -> RunArtifacts:
    fp = fit_pipeline(cfg, workers)
    test = fp.table.view("test")
    with stage("debate"):
        ev = score_view(fp, test)
    report = {
        "dataset": cfg.data.name if cfg.data.source == "synthetic" else str(cfg.data.path),
        "seed": cfg.seed,
        "n_test": int(test.rows),
        "config_digest": cfg.mad.digest(),
    }
    with stage("metrics"):
        report.update(metrics_report(fp, ev))

    p_values = flags = None
    if cfg.conformal.enabled:
        with stage("conformal"):
            cal_ev = score_view(fp, fp.table.view("calibration"), mode="per_input_reset")
            cal = cf.calibrate(cal_ev.scores)
            p_values = cf.p_value(cal, ev.scores)
            flags = cf.decide(p_values, cfg.conformal.alpha)
        y = test.labels.astype(bool)
        report["conformal"] = {
            "alpha": cfg.conformal.alpha,
            "n_calibration": cal.n,
            "flagged": int(flags.sum()),
            "fpr": float(flags[~y].mean()) if (~y).any() else None,
            "recall": float(flags[y].mean()) if y.any() else None,
        }
    rows = []
    for k, rid in enumerate(test.row_ids.tolist()):
        if p_values is None:
            rows.append((rid, float(ev.scores[k])))
        else:
            rows.append((rid, float(ev.scores[k]), float(p_values[k]), int(flags[k])))
    ledger = ev.stream.ledger
    holds, _ = regret_check(ledger)
    ledger_d = ledger.to_dict()
    ledger_d["mode"] = cfg.mode
    ledger_d["holds"] = bool(holds)
    return RunArtifacts(fp, ev, report, ledger_d, rows)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("eta", "lambda", "gamma", "rounds_T", "pr_auc", "roc_auc", "recall_at_1pct_fpr", "ece")


def select_config(rows: list[dict]) -> dict:
    """Highest validation PR-AUC; ties go to the lower ECE, then grid order."""
    best = None
    for r in rows:
        if best is None or r["pr_auc"] > best["pr_auc"] or (r["pr_auc"] == best["pr_auc"] and r["ece"] < best["ece"]):
            best = r
    return best


def ablate(cfg: RunConfig, workers: int = 1, fp: FittedPipeline | None = None) -> tuple[list[dict], dict]:
    fp = fp or fit_pipeline(cfg, workers)
    val = fp.table.view("validation")
    if val.rows == 0:
        raise ValueError("ablation needs a nonempty validation split")
    batch = build_messages(fp.pool, fp.normalizers, fp.features(val), cfg.mad, val.row_ids)
    grid = cfg.grid
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for eta, lam, gamma, T in itertools.product(grid["eta"], grid["lambda"], grid["gamma"], grid["rounds_T"]):
            mad = replace(cfg.mad, eta=float(eta), lam=float(lam), gamma=float(gamma), rounds_T=int(T))
            ev = score_view(fp, val, mad=mad, batch=batch)
            rep = detection_report(ev.scores, val.labels, cfg.metrics.fpr_budget, cfg.metrics.ece_bins)
            rows.append({
                "eta": float(eta), "lambda": float(lam), "gamma": float(gamma), "rounds_T": int(T),
                "pr_auc": rep["pr_auc"], "roc_auc": rep["roc_auc"],
                "recall_at_1pct_fpr": rep["recall_at_1pct_fpr"], "ece": rep["ece"],
            })
    return rows, select_config(rows)


# ---------------------------------------------------------------------------
# Corruption sweep
# ---------------------------------------------------------------------------

CORRUPTION_COLUMNS = ("kind", "severity", "pr_auc", "roc_auc", "recall_at_1pct_fpr", "macro_f1", "ece")


def corruption_sweep(cfg: RunConfig, workers: int = 1, fp: FittedPipeline | None = None) -> list[dict]:
    """Corrupt the test split per (kind, severity) and rescore with the fitted pipeline."""
    fp = fp or fit_pipeline(cfg, workers)
    test = fp.table.view("test")
    rows = []
    for kind in cfg.sweep["kinds"]:
        for sev in cfg.sweep["severities"]:
            view = corrupt(test, CorruptionSpec(kind, float(sev), None, cfg.seed), fp.model)
            ev = score_view(fp, view)
            rep = detection_report(ev.scores, view.labels, cfg.metrics.fpr_budget, cfg.metrics.ece_bins)
            rows.append({"kind": kind, "severity": float(sev), **{k: rep[k] for k in CORRUPTION_COLUMNS[2:]}})
            logger.info("corruption %s@%.2f: roc_auc=%.4f", kind, sev, rep["roc_auc"])
    return rows


# ---------------------------------------------------------------------------
# Regret simulation
# ---------------------------------------------------------------------------

REGRET_COLUMNS = ("generator", "seed", "N", "eta", "T", "regret", "bound", "slack", "holds")


def regret_sim(cfg: RunConfig) -> tuple[list[dict], list[tuple]]:
    """Run EG on generated losses per seed; raise ``BoundViolation`` if any run breaks the bound.

    Returns summary rows and curve points ``(generator, seed, t, regret, bound_t)``.
    """
    rc = cfg.regret
    gens = LOSS_GENERATORS if rc.generator == "all" else (rc.generator,)
    rows, curves = [], []
    step = max(1, rc.T // 100)
    for gen in gens:
        for s in range(rc.seeds):
            seed = cfg.seed + s
            ledger, curve = simulate_regret(rc.N, rc.eta, rc.T, gen, seed, rc.lam, rc.gamma)
            holds, slack = regret_check(ledger, rc.N, rc.eta, rc.T)
            rows.append({"generator": gen, "seed": seed, "N": rc.N, "eta": rc.eta, "T": rc.T,
                         "regret": ledger.regret, "bound": ledger.bound, "slack": slack, "holds": bool(holds)})
            for t in range(step - 1, rc.T, step):
                curves.append((gen, seed, t + 1, float(curve[t]), math.log(rc.N) / rc.eta + rc.eta * (t + 1) / 8.0))
    return rows, curves


def check_regret_rows(rows: list[dict]) -> None:
    bad = [r for r in rows if not r["holds"]]
    if bad:
        r = bad[0]
        raise BoundViolation(f"regret {r['regret']:.6g} exceeds bound {r['bound']:.6g} ({r['generator']}, seed {r['seed']})")
