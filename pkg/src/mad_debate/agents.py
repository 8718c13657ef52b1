"""Detector pool: five heterogeneous unsupervised detectors behind one contract.

Every detector maps a preprocessed row to a raw anomaly score (higher means
more anomalous). The pool adds bootstrap replicates for confidence and a
uniform occlusion explainer for evidence.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import DimensionMismatch, MadError, stream

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329
DETECTOR_NAMES = ("mahalanobis", "knn_dist", "histogram", "iforest", "pca_recon")


class DegenerateTrain(MadError):
    pass


class Detector(Protocol):
    name: str

    def fit(self, X: np.ndarray, y: np.ndarray | None = None, rng: np.random.Generator | None = None) -> Detector:
        ...

    def score(self, X: np.ndarray) -> np.ndarray:
        ...


# ---------------------------------------------------------------------------
# Built-in detectors
# ---------------------------------------------------------------------------


class Mahalanobis:
    """Squared Mahalanobis distance under a shrunk covariance ``S + tau*I``."""

    name = "mahalanobis"

    def __init__(self, shrinkage: float = 1e-3) -> None:
        self.shrinkage = shrinkage

    def fit(self, X, y=None, rng=None):
        self.mean_ = X.mean(axis=0)
        d = X.shape[1]
        centered = X - self.mean_
        cov = centered.T @ centered / X.shape[0]
        tau = self.shrinkage * np.trace(cov) / d
        tau = max(tau, 1e-12)
        self.precision_ = np.linalg.inv(cov + tau * np.eye(d))
        self.precision_ = 0.5 * (self.precision_ + self.precision_.T)
        return self

    def score(self, X):
        z = X - self.mean_
        return np.einsum("ij,jk,ik->i", z, self.precision_, z)


class KnnDistance:
    """Mean Euclidean distance to the k nearest training rows."""

    name = "knn_dist"

    def __init__(self, k: int = 10) -> None:
        self.k = k

    def fit(self, X, y=None, rng=None):
        self.k_ = min(self.k, X.shape[0])
        self.tree_ = cKDTree(X)
        self.n_ = X.shape[0]
        return self

    def score(self, X):
        dist, _ = self.tree_.query(X, k=self.k_)
        dist = dist.reshape(X.shape[0], -1)
        return dist.mean(axis=1)

    def score_train(self, X):
        # leave-self-out so train scores are comparable to unseen rows
        k = min(self.k_ + 1, self.n_)
        dist, _ = self.tree_.query(X, k=k)
        dist = dist.reshape(X.shape[0], -1)
        if k > 1:
            dist = dist[:, 1:]
        return dist.mean(axis=1)


class Histogram:
    """HBOS: per-feature equal-width histograms, score = sum of -log(mass)."""

    name = "histogram"

    def __init__(self, bins: int = 20, floor: float = 1e-12) -> None:
        self.bins = bins
        self.floor = floor

    def fit(self, X, y=None, rng=None):
        n, d = X.shape
        self.lo_ = X.min(axis=0)
        self.hi_ = X.max(axis=0)
        self.mass_ = np.zeros((d, self.bins))
        for j in range(d):
            idx = self._bin(X[:, j], j)
            self.mass_[j] = np.bincount(idx, minlength=self.bins)[: self.bins] / n
        return self

    def _bin(self, col, j):
        lo, hi = self.lo_[j], self.hi_[j]
        if hi <= lo:
            return np.zeros(col.shape, dtype=np.int64)
        idx = np.floor((col - lo) / (hi - lo) * self.bins).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)

    def score(self, X):
        total = np.zeros(X.shape[0])
        for j in range(X.shape[1]):
            col = X[:, j]
            mass = self.mass_[j, self._bin(col, j)]
            inside = (col >= self.lo_[j]) & (col <= self.hi_[j])
            total -= np.log(np.where(inside, mass, 0.0) + self.floor)
        return total


def average_path_length(n) -> np.ndarray:
    """Expected path length ``c(n)`` of an unsuccessful BST search."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n > 2
    out[n == 2] = 1.0
    nb = n[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    return out


class _ITree:
    __slots__ = ("feature", "threshold", "left", "right", "depth", "size")

    def __init__(self, X: np.ndarray, rng: np.random.Generator, height_limit: int) -> None:
        feature, threshold, left, right, depth, size = [], [], [], [], [], []
        stack = [(np.arange(X.shape[0]), 0, -1, False)]
        while stack:
            rows, dep, parent, is_right = stack.pop()
            node = len(feature)
            if parent >= 0:
                (right if is_right else left)[parent] = node
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            depth.append(dep)
            size.append(rows.size)
            if dep >= height_limit or rows.size <= 1:
                continue
            sub = X[rows]
            lo, hi = sub.min(axis=0), sub.max(axis=0)
            usable = np.flatnonzero(hi > lo)
            if usable.size == 0:
                continue
            f = int(usable[rng.integers(usable.size)])
            t = float(rng.uniform(lo[f], hi[f]))
            go_left = sub[:, f] < t
            feature[node] = f
            threshold[node] = t
            stack.append((rows[~go_left], dep + 1, node, True))
            stack.append((rows[go_left], dep + 1, node, False))
        self.feature = np.array(feature, dtype=np.int64)
        self.threshold = np.array(threshold)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.depth = np.array(depth, dtype=np.float64)
        self.size = np.array(size, dtype=np.float64)

    def path_length(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                break
            a = rows[active]
            na = node[active]
            go_left = X[a, f[active]] < self.threshold[na]
            node[active] = np.where(go_left, self.left[na], self.right[na])
        return self.depth[node] + average_path_length(self.size[node])


class IsolationForest:
    """Isolation forest with the standard ``2^(-E[h]/c(psi))`` score."""

    name = "iforest"

    def __init__(self, n_trees: int = 100, subsample: int = 256) -> None:
        self.n_trees = n_trees
        self.subsample = subsample

    def fit(self, X, y=None, rng=None):
        if rng is None:
            raise ValueError("IsolationForest.fit needs a random generator")
        n = X.shape[0]
        psi = min(self.subsample, n)
        self.psi_ = psi
        limit = int(math.ceil(math.log2(psi))) if psi > 1 else 0
        self.trees_ = []
        for _ in range(self.n_trees):
            rows = rng.choice(n, size=psi, replace=False)
            self.trees_.append(_ITree(X[rows], rng, limit))
        self.c_ = float(average_path_length(psi)) if psi > 1 else 1.0
        return self

    def score(self, X):
        mean_h = np.zeros(X.shape[0])
        for tree in self.trees_:
            mean_h += tree.path_length(X)
        mean_h /= len(self.trees_)
        return np.power(2.0, -mean_h / self.c_)


class PcaReconstruction:
    """Squared residual after projecting onto the top components (>= 90% variance)."""

    name = "pca_recon"

    def __init__(self, variance: float = 0.9) -> None:
        self.variance = variance

    def fit(self, X, y=None, rng=None):
        self.mean_ = X.mean(axis=0)
        _, s, vt = np.linalg.svd(X - self.mean_, full_matrices=False)
        var = s**2
        total = var.sum()
        if total <= 0:
            q = 0
        else:
            q = int(np.searchsorted(np.cumsum(var) / total, self.variance - 1e-12) + 1)
        self.components_ = vt[: min(q, vt.shape[0])]
        return self

    def score(self, X):
        z = X - self.mean_
        # einsum without BLAS keeps each row's score independent of batch size
        proj = np.einsum("ij,kj->ik", z, self.components_)
        resid = z - np.einsum("ik,kj->ij", proj, self.components_)
        return np.einsum("ij,ij->i", resid, resid)


# ---------------------------------------------------------------------------
# Pool
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolConfig:
    detectors: tuple[str, ...] = DETECTOR_NAMES
    bootstrap_B: int = 16
    knn_k: int = 10
    n_trees: int = 100
    subsample: int = 256
    hbos_bins: int = 20
    pca_variance: float = 0.9

    def __post_init__(self) -> None:
        object.__setattr__(self, "detectors", tuple(self.detectors))
        unknown = set(self.detectors) - set(DETECTOR_NAMES)
        if unknown:
            raise ValueError(f"unknown detectors {sorted(unknown)}")
        if not self.detectors:
            raise ValueError("pool needs at least one detector")
        if self.bootstrap_B < 2:
            raise ValueError("bootstrap_B must be >= 2")

    def build(self, name: str) -> Detector:
        if name == "mahalanobis":
            return Mahalanobis()
        if name == "knn_dist":
            return KnnDistance(self.knn_k)
        if name == "histogram":
            return Histogram(self.hbos_bins)
        if name == "iforest":
            return IsolationForest(self.n_trees, self.subsample)
        return PcaReconstruction(self.pca_variance)


@dataclass(frozen=True)
class ConfidenceModel:
    """Bootstrap replicates per agent and the per-agent reference variance."""

    replicates: tuple[tuple[Detector, ...], ...]
    v_ref: np.ndarray

    @property
    def B(self) -> int:
        return len(self.replicates[0])

    def variance(self, X: np.ndarray) -> np.ndarray:
        """Population variance of replicate raw scores, shape (rows, N)."""
        out = np.empty((X.shape[0], len(self.replicates)))
        for i, reps in enumerate(self.replicates):
            S = np.stack([r.score(X) for r in reps])
            out[:, i] = S.var(axis=0)
        return out

    def confidence(self, X: np.ndarray) -> np.ndarray:
        return confidence_from_variance(self.variance(X), self.v_ref)


def confidence_from_variance(v, v_ref) -> np.ndarray:
    """Map replicate variance to ``1 / (1 + v / v_ref)``."""
    return 1.0 / (1.0 + np.asarray(v, dtype=np.float64) / np.asarray(v_ref, dtype=np.float64))


@dataclass(frozen=True)
class AgentPool:
    names: tuple[str, ...]
    detectors: tuple[Detector, ...]
    conf: ConfidenceModel
    train_scores: np.ndarray  # (n_train, N), used to fit normalizers
    feature_median: np.ndarray
    feature_std: np.ndarray
    labels_seen: bool = False

    @property
    def N(self) -> int:
        return len(self.detectors)

    @property
    def d(self) -> int:
        return self.feature_median.size

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.d:
            raise DimensionMismatch(f"rows have {X.shape[1]} features, pool was fit on {self.d}")
        return X

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        return np.column_stack([det.score(X) for det in self.detectors])

    def occlusion(self, X: np.ndarray, agents: Sequence[int] | None = None) -> np.ndarray:
        """Occlusion attributions, shape (rows, len(agents), d).

        Entry ``[r, i, j]`` is ``score_i(x_r) - score_i(x_r with feature j set to its train median)``.
        """
        X = self._check(X)
        m, d = X.shape
        agents = range(self.N) if agents is None else agents
        stacked = np.repeat(X[None, :, :], d, axis=0)
        stacked[np.arange(d), :, np.arange(d)] = self.feature_median[:, None]
        stacked = stacked.reshape(d * m, d)
        out = np.empty((m, len(agents), d))
        for k, i in enumerate(agents):
            det = self.detectors[i]
            base = det.score(X)
            occl = det.score(stacked).reshape(d, m).T
            out[:, k, :] = base[:, None] - occl
        return out

    def confidence(self, X: np.ndarray) -> np.ndarray:
        return self.conf.confidence(self._check(X))


def _train_scores(det: Detector, X: np.ndarray) -> np.ndarray:
    fn = getattr(det, "score_train", None)
    return fn(X) if fn is not None else det.score(X)


def fit_pool(
    X_train: np.ndarray,
    labels: np.ndarray | None = None,
    config: PoolConfig | None = None,
    seed: int = 0,
    X_val: np.ndarray | None = None,
    workers: int = 1,
) -> AgentPool:
    """Fit every configured detector plus ``B`` bootstrap replicates each.

    ``v_ref`` is the median replicate variance over ``X_val`` (train rows when
    no validation rows are given), floored at 1e-12. Labels are forwarded to
    ``fit`` for detectors that accept them; the built-ins ignore them.
    """
    config = config or PoolConfig()
    X = np.asarray(X_train, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DegenerateTrain("training matrix is empty")
    if not np.all(np.isfinite(X)):
        raise DegenerateTrain("training matrix has non-finite entries")
    if X.shape[0] < 2 or np.all(X.std(axis=0) == 0):
        raise DegenerateTrain("every training column has zero variance")
    n = X.shape[0]

    jobs = []
    for name in config.detectors:
        jobs.append((name, -1, None))
        for b in range(config.bootstrap_B):
            idx = stream(seed, "bootstrap", name, b).integers(0, n, size=n)
            jobs.append((name, b, idx))

    def run(job):
        name, b, idx = job
        det = config.build(name)
        data = X if idx is None else X[idx]
        y = labels if idx is None or labels is None else labels[idx]
        return det.fit(data, y, stream(seed, "fit", name, "main" if b < 0 else b))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            fitted = list(ex.map(run, jobs))
    else:
        fitted = [run(j) for j in jobs]

    per = config.bootstrap_B + 1
    mains = tuple(fitted[k * per] for k in range(len(config.detectors)))
    reps = tuple(tuple(fitted[k * per + 1 : (k + 1) * per]) for k in range(len(config.detectors)))

    ref = X if X_val is None or len(X_val) == 0 else np.asarray(X_val, dtype=np.float64)
    probe = ConfidenceModel(reps, np.ones(len(reps)))
    v_ref = np.maximum(np.median(probe.variance(ref), axis=0), 1e-12)

    train_scores = np.column_stack([_train_scores(det, X) for det in mains])
    logger.info("fitted pool %s with B=%d", ",".join(config.detectors), config.bootstrap_B)
    return AgentPool(
        names=tuple(config.detectors),
        detectors=mains,
        conf=ConfidenceModel(reps, v_ref),
        train_scores=train_scores,
        feature_median=np.median(X, axis=0),
        feature_std=X.std(axis=0),
        labels_seen=labels is not None,
    )


def raw_scores(pool: AgentPool, row: np.ndarray) -> np.ndarray:
    return pool.raw_scores(row)[0]


def occlusion_attribution(pool: AgentPool, agent: int, row: np.ndarray) -> np.ndarray:
    return pool.occlusion(row, agents=[agent])[0, 0]


def confidence(pool: AgentPool, agent: int, row: np.ndarray) -> float:
    X = pool._check(row)
    reps = pool.conf.replicates[agent]
    v = np.stack([r.score(X) for r in reps]).var(axis=0)[0]
    return float(confidence_from_variance(v, pool.conf.v_ref[agent]))
