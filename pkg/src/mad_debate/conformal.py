"""Split-conformal p-values over debated scores, calibrated on held-out normals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import MadError


class EmptyCalibration(MadError):
    pass


@dataclass(frozen=True, eq=False)
class ConformalCalibration:
    scores: np.ndarray  # sorted ascending, duplicates kept

    @property
    def n(self) -> int:
        return self.scores.size


def calibrate(scores) -> ConformalCalibration:
    s = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    if s.size == 0:
        raise EmptyCalibration("calibration needs at least one score")
    if not np.all(np.isfinite(s)):
        raise ValueError("calibration scores must be finite")
    s.setflags(write=False)
    return ConformalCalibration(s)


def p_value(cal: ConformalCalibration, score):
    """``(1 + #{calibration >= score}) / (n + 1)``; vectorized over ``score``."""
    x = np.asarray(score, dtype=np.float64)
    at_least = cal.n - np.searchsorted(cal.scores, x, side="left")
    out = (1.0 + at_least) / (cal.n + 1.0)
    return float(out) if np.ndim(out) == 0 else out


def decide(p, alpha_cf: float):
    if not 0.0 < alpha_cf < 1.0:
        raise ValueError("alpha_cf must lie in (0, 1)")
    out = (np.asarray(p) <= alpha_cf).astype(np.int8)
    return int(out) if np.ndim(out) == 0 else out
