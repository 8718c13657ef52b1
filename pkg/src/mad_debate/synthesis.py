"""Loss synthesis: turn one round of messages into bounded per-agent losses.

Per agent the loss is ``clip(pred + lam * dispute + gamma * evidence, 0, 1)``:

* ``pred`` is cross-entropy against a label when one is available, otherwise
  the mean absolute score change under small Gaussian input perturbations;
* ``dispute`` is ``c_i * (s_i - s_hat)^2`` against the pre-update aggregate;
* ``evidence`` is ``c_i * (1 - cos(a_i, consensus))`` over unit attributions.

The array functions operate on a leading batch axis so the coordinator can
debate many rows at once; the message-level functions wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    CoordinatorState,
    DimensionMismatch,
    MadConfig,
    Message,
    PerturbationSpec,
    SynthesizedLoss,
    WeightVector,
    stream,
)
from .normalize import ScoreNormalizer, normalize


@dataclass(frozen=True, eq=False)
class ConsensusEvidence:
    consensus: np.ndarray
    consensus_unit: np.ndarray


def unit_rows(A: np.ndarray) -> np.ndarray:
    """Normalize the last axis to unit length; zero vectors stay zero."""
    A = np.asarray(A, dtype=np.float64)
    norm = np.linalg.norm(A, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, A / safe, 0.0)


def unit_evidence(a) -> np.ndarray:
    return unit_rows(np.asarray(a, dtype=np.float64).reshape(-1))


def consensus_attribution(weights: WeightVector | np.ndarray, unit_evidences) -> ConsensusEvidence:
    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, dtype=np.float64)
    try:
        U = np.asarray(unit_evidences, dtype=np.float64)
    except ValueError as exc:
        raise DimensionMismatch("evidence vectors must share one dimension") from exc
    if U.ndim != 2 or U.shape[0] != w.size:
        raise DimensionMismatch(f"expected {w.size} evidence vectors of one dimension, got shape {U.shape}")
    bar = w @ U
    return ConsensusEvidence(bar, unit_rows(bar))


def pred_loss_supervised(score, label, epsilon: float = 1e-6):
    s = np.asarray(score, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    out = -y * np.log(np.maximum(s, epsilon)) - (1.0 - y) * np.log(np.maximum(1.0 - s, epsilon))
    return float(out) if np.ndim(out) == 0 else out


def dispute_loss(score, confidence, aggregate):
    out = np.asarray(confidence, dtype=np.float64) * (np.asarray(score) - np.asarray(aggregate)) ** 2
    return float(out) if np.ndim(out) == 0 else out


def evidence_loss(unit_attr, consensus_unit, confidence):
    """``c * (1 - cos)`` over the last axis; 0 when either vector is zero."""
    a = np.asarray(unit_attr, dtype=np.float64)
    b = np.asarray(consensus_unit, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    live = (na > 0) & (nb > 0)
    cos = np.einsum("...j,...j->...", a, b) / np.where(live, na * nb, 1.0)
    cos = np.clip(cos, -1.0, 1.0)
    # rounding in the two normalizations leaves cos a few ulps short of 1
    cos = np.where(cos > 1.0 - 1e-12, 1.0, cos)
    out = np.where(live, np.asarray(confidence, dtype=np.float64) * (1.0 - cos), 0.0)
    return float(out) if np.ndim(out) == 0 else out


def total_loss(pred, dispute, evidence, lam: float, gamma: float):
    out = np.clip(np.asarray(pred) + lam * np.asarray(dispute) + gamma * np.asarray(evidence), 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def synthesize_arrays(
    weights: np.ndarray,
    scores: np.ndarray,
    conf: np.ndarray,
    unit_attr: np.ndarray,
    pred: np.ndarray,
    lam: float,
    gamma: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched synthesis over rows.

    Shapes: weights/scores/conf/pred ``(m, N)``, unit_attr ``(m, N, d)``.
    Returns ``(total, pred, dispute, evidence, aggregate)`` where aggregate is
    the pre-update score ``sum_i w_i s_i`` with shape ``(m,)``.
    """
    agg = np.einsum("mi,mi->m", weights, scores)
    bar = np.einsum("mi,mid->md", weights, unit_attr)
    bar_unit = unit_rows(bar)
    disp = dispute_loss(scores, conf, agg[:, None])
    evid = evidence_loss(unit_attr, bar_unit[:, None, :], conf)
    total = total_loss(pred, disp, evid, lam, gamma)
    return total, pred, disp, evid, agg


def stability_losses(
    pool,
    normalizers: Sequence[ScoreNormalizer],
    X: np.ndarray,
    perturbation: PerturbationSpec,
    seed: int,
    row_keys: Sequence,
) -> np.ndarray:
    """Unsupervised prediction loss for every (row, agent), shape (m, N).

    Row ``r`` draws its ``K`` perturbations from the stream
    ``(seed, "perturb", row_keys[r])``; noise per feature has standard
    deviation ``noise_scale * train_std``.
    """
    X = pool._check(X)
    m, d = X.shape
    K = perturbation.samples_K
    if perturbation.noise_scale == 0.0 or m == 0:
        return np.zeros((m, pool.N))
    scale = perturbation.noise_scale * pool.feature_std
    noise = np.stack([stream(seed, "perturb", key).standard_normal((K, d)) for key in row_keys])
    Xp = (X[:, None, :] + noise * scale).reshape(m * K, d)
    out = np.empty((m, pool.N))
    for i, det in enumerate(pool.detectors):
        nu = normalizers[i]
        base = np.asarray(normalize(nu, det.score(X)))
        pert = np.asarray(normalize(nu, det.score(Xp))).reshape(m, K)
        out[:, i] = np.abs(base[:, None] - pert).mean(axis=1)
    return out


def pred_loss_unsupervised(
    pool,
    agent: int,
    row: np.ndarray,
    normalizer: ScoreNormalizer,
    perturbation: PerturbationSpec,
    seed: int,
    row_key=0,
) -> float:
    X = pool._check(row)
    if perturbation.noise_scale == 0.0:
        return 0.0
    det = pool.detectors[agent]
    noise = stream(seed, "perturb", row_key).standard_normal((perturbation.samples_K, X.shape[1]))
    Xp = X + noise * (perturbation.noise_scale * pool.feature_std)
    base = normalize(normalizer, det.score(X))[0]
    pert = normalize(normalizer, det.score(Xp))
    return float(np.mean(np.abs(base - pert)))


def synthesize(
    state: CoordinatorState,
    messages: Sequence[Message],
    config: MadConfig,
    label: int | None = None,
    stability: Sequence[float] | np.ndarray | None = None,
) -> tuple[SynthesizedLoss, CoordinatorState]:
    """Loss synthesis for one round of one input.

    The prediction term is supervised cross-entropy when ``config.supervised``
    and ``label`` is given; otherwise ``stability`` must carry the per-agent
    perturbation losses. Weights in the returned state are unchanged.
    """
    N = len(state.weights)
    if len(messages) != N:
        raise DimensionMismatch(f"{len(messages)} messages for {N} agents")
    msgs = sorted(messages, key=lambda m: m.agent_id)
    scores = np.array([m.score for m in msgs])
    conf = np.array([m.confidence for m in msgs])
    dims = {m.evidence.attribution.size for m in msgs}
    if len(dims) != 1:
        raise DimensionMismatch("attributions differ in length")
    attr = unit_rows(np.stack([m.evidence.attribution for m in msgs]))
    if config.supervised and label is not None:
        pred = pred_loss_supervised(scores, np.full(N, float(label)), config.epsilon)
    else:
        if stability is None:
            raise ValueError("unsupervised synthesis needs per-agent stability losses")
        pred = np.asarray(stability, dtype=np.float64).reshape(N)
    total, pred, disp, evid, _ = synthesize_arrays(
        state.weights.weights[None, :], scores[None, :], conf[None, :], attr[None], pred[None, :],
        config.lam, config.gamma,
    )
    loss = SynthesizedLoss(total[0], pred=pred[0], dispute=disp[0], evidence=evid[0])
    return loss, CoordinatorState(state.round + 1, state.weights)
