"""Detection, calibration, slice-robustness and disagreement metrics."""

from __future__ import annotations

import math
import warnings
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import MadError


class SingleClass(MadError):
    pass


class NoPositives(MadError):
    pass


class NoUsableSlices(MadError):
    pass


class SingleAgent(MadError):
    pass


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties count 1/2)."""
    s, y = _prep(scores, labels)
    npos, nneg = int(y.sum()), int((~y).sum())
    if npos == 0 or nneg == 0:
        raise SingleClass("roc_auc needs both classes")
    ranks = rankdata(s)
    u = ranks[y].sum() - npos * (npos + 1) / 2.0
    return float(u / (npos * nneg))


def pr_auc(scores, labels) -> float:
    """Average precision: sum over distinct descending thresholds of dR * P."""
    s, y = _prep(scores, labels)
    npos = int(y.sum())
    if npos == 0:
        raise NoPositives("pr_auc needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # last index of each block of tied scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall = tp / npos
    dr = np.diff(np.r_[0.0, recall])
    return float(np.sum(dr * precision))


def fpr_threshold(scores, labels, fpr_budget: float = 0.01) -> float:
    """Smallest observed score ``t`` whose alert set ``score >= t`` keeps FPR <= budget.

    Returns ``inf`` when even the top score would exceed the budget.
    """
    s, y = _prep(scores, labels)
    neg = np.sort(s[~y])[::-1]
    if neg.size == 0 or y.sum() == 0:
        raise SingleClass("recall_at_fpr needs both classes")
    allowed = int(math.floor(fpr_budget * neg.size + 1e-9))
    if allowed >= neg.size:
        return float(s.min())
    v = neg[allowed]
    above = s[s > v]
    return float(above.min()) if above.size else math.inf


def recall_at_fpr(scores, labels, fpr_budget: float = 0.01) -> float:
    s, y = _prep(scores, labels)
    t = fpr_threshold(s, y, fpr_budget)
    return float(np.mean(s[y] >= t))


def macro_f1(scores, labels, threshold: float | None = None) -> float:
    """Mean F1 over classes {0, 1} for the decision ``score >= threshold``.

    The default threshold is the 1%-FPR alert threshold.
    """
    s, y = _prep(scores, labels)
    if threshold is None:
        threshold = fpr_threshold(s, y, 0.01)
    pred = s >= threshold
    f1 = []
    for cls_pred, cls_true in ((pred, y), (~pred, ~y)):
        tp = np.sum(cls_pred & cls_true)
        fp = np.sum(cls_pred & ~cls_true)
        fn = np.sum(~cls_pred & cls_true)
        denom = 2 * tp + fp + fn
        f1.append(0.0 if denom == 0 or tp == 0 else 2.0 * tp / denom)
    return float(np.mean(f1))


def ece(scores, labels, bins: int = 15) -> float:
    s, y = _prep(scores, labels)
    if s.size == 0:
        return 0.0
    if np.any((s < 0) | (s > 1)):
        raise ValueError("ece expects scores in [0, 1]")
    idx = np.minimum((s * bins).astype(np.int64), bins - 1)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=s, minlength=bins)
    pos_sum = np.bincount(idx, weights=y.astype(np.float64), minlength=bins)
    live = count > 0
    gap = np.abs(conf_sum[live] - pos_sum[live]) / count[live]
    return float(np.sum(count[live] / s.size * gap))


def slice_gap(
    scores,
    labels,
    slices: Sequence,
    metric: Callable = roc_auc,
) -> tuple[float, dict[str, float]]:
    """Max minus min of ``metric`` across slices with both classes present.

    ``slices`` holds ``Slice`` objects or plain index arrays. Returns the gap
    and the per-slice values that entered it.
    """
    s, y = _prep(scores, labels)
    per: dict[str, float] = {}
    for k, sl in enumerate(slices):
        name = getattr(sl, "name", f"slice{k}")
        rows = np.asarray(getattr(sl, "rows", sl), dtype=np.int64)
        ys = y[rows]
        if ys.all() or not ys.any():
            warnings.warn(f"slice {name!r} lacks one class; skipped")
            continue
        per[name] = metric(s[rows], ys)
    if len(per) < 2:
        raise NoUsableSlices(f"only {len(per)} usable slice(s)")
    vals = list(per.values())
    return float(max(vals) - min(vals)), per


def disagreement(normalized_scores) -> tuple[np.ndarray, dict[str, float]]:
    """Per-row population variance across agents, plus median and p90 (nearest rank)."""
    S = np.asarray(normalized_scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] < 2:
        raise SingleAgent("disagreement needs at least two agents")
    v = S.var(axis=1)
    v[np.ptp(S, axis=1) == 0] = 0.0
    if v.size == 0:
        return v, {"median": 0.0, "p90": 0.0}
    srt = np.sort(v)
    p90 = srt[max(int(math.ceil(0.9 * srt.size)) - 1, 0)]
    return v, {"median": float(np.median(v)), "p90": float(p90)}


def detection_report(scores, labels, fpr_budget: float = 0.01, ece_bins: int = 15) -> dict[str, float]:
    s, y = _prep(scores, labels)
    threshold = fpr_threshold(s, y, fpr_budget)
    e = ece(s, y, ece_bins)
    return {
        "pr_auc": pr_auc(s, y),
        "roc_auc": roc_auc(s, y),
        "recall_at_1pct_fpr": recall_at_fpr(s, y, fpr_budget),
        "macro_f1": macro_f1(s, y, threshold),
        "ece": e,
        "ece_pct": 100.0 * e,
    }
