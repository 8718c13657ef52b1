"""Monotone per-agent maps from raw scores into [0, 1]."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import MadError

logger = logging.getLogger(__name__)

NORMALIZER_KINDS = ("rank_percentile", "min_max", "z_sigmoid")


class EmptyScores(MadError):
    pass


@dataclass(frozen=True, eq=False)
class ScoreNormalizer:
    kind: str
    sorted_scores: np.ndarray | None = None
    lo: float = 0.0
    hi: float = 0.0
    mean: float = 0.0
    std: float = 1.0
    degenerate: bool = False

    def __call__(self, s):
        return normalize(self, s)


def fit_normalizer(kind: str, train_scores) -> ScoreNormalizer:
    s = np.asarray(train_scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise EmptyScores("cannot fit a normalizer on zero scores")
    if kind == "rank_percentile":
        arr = np.sort(s)
        arr.setflags(write=False)
        return ScoreNormalizer(kind, sorted_scores=arr)
    if kind == "min_max":
        lo, hi = float(s.min()), float(s.max())
        degenerate = hi <= lo
        if degenerate:
            logger.warning("min_max normalizer fit on constant scores; mapping everything to 0.5")
        return ScoreNormalizer(kind, lo=lo, hi=hi, degenerate=degenerate)
    if kind == "z_sigmoid":
        return ScoreNormalizer(kind, mean=float(s.mean()), std=max(float(s.std()), 1e-12))
    raise ValueError(f"unknown normalizer kind {kind!r}")


def normalize(nu: ScoreNormalizer, s):
    """Apply the fitted map; accepts scalars or arrays.

    rank_percentile counts ``#{train <= s} / (n + 1)``.
    """
    x = np.asarray(s, dtype=np.float64)
    if nu.kind == "rank_percentile":
        arr = nu.sorted_scores
        out = np.searchsorted(arr, x, side="right") / (arr.size + 1.0)
    elif nu.kind == "min_max":
        if nu.degenerate:
            out = np.full_like(x, 0.5)
        else:
            out = np.clip((x - nu.lo) / (nu.hi - nu.lo), 0.0, 1.0)
    else:
        with np.errstate(over="ignore"):
            out = 1.0 / (1.0 + np.exp(-(x - nu.mean) / nu.std))
    return float(out) if np.ndim(out) == 0 else out


def fit_normalizers(kind: str, train_scores: np.ndarray) -> tuple[ScoreNormalizer, ...]:
    """One normalizer per column of a (rows, N) raw-score matrix."""
    S = np.asarray(train_scores, dtype=np.float64)
    return tuple(fit_normalizer(kind, S[:, i]) for i in range(S.shape[1]))


def normalize_matrix(normalizers, raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(raw)
    for i, nu in enumerate(normalizers):
        out[..., i] = normalize(nu, raw[..., i])
    return out
