"""Debate loop: messages -> synthesized losses -> exponentiated-gradient weights."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    CoordinatorState,
    DebateTrace,
    DimensionMismatch,
    Evidence,
    MadConfig,
    MadError,
    Message,
    RoundRecord,
    SynthesizedLoss,
    WeightVector,
    stream,
    validate_weight_vector,
)
from .normalize import normalize_matrix
from .synthesis import pred_loss_supervised, stability_losses, synthesize_arrays, unit_rows

logger = logging.getLogger(__name__)

STREAM_MODES = ("per_input_reset", "persistent_weights")


class BoundViolation(MadError):
    pass


# ---------------------------------------------------------------------------
# Weight update and aggregation
# ---------------------------------------------------------------------------


def eg_rows(W: np.ndarray, L: np.ndarray, eta: float) -> np.ndarray:
    """Row-wise ``w_i exp(-eta l_i) / sum_j w_j exp(-eta l_j)``.

    Losses are shifted by their row minimum first, which cancels in the ratio
    and keeps the exponentials in range.
    """
    shifted = L - L.min(axis=-1, keepdims=True)
    U = W * np.exp(-eta * shifted)
    return U / U.sum(axis=-1, keepdims=True)


def eg_update(alpha: WeightVector, losses: SynthesizedLoss | np.ndarray, eta: float) -> WeightVector:
    if not eta > 0:
        raise ValueError("eta must be > 0")
    ell = losses.losses if isinstance(losses, SynthesizedLoss) else np.asarray(losses, dtype=np.float64)
    if ell.shape != alpha.weights.shape:
        raise DimensionMismatch("loss vector and weights differ in length")
    if np.any(ell < 0) or np.any(ell > 1):
        raise ValueError("losses must lie in [0, 1]")
    return validate_weight_vector(eg_rows(alpha.weights, ell, eta))


def aggregate_score(alpha: WeightVector, messages: Sequence[Message]) -> float:
    if len(messages) != len(alpha):
        raise DimensionMismatch(f"{len(messages)} messages for {len(alpha)} weights")
    scores = np.array([m.score for m in sorted(messages, key=lambda m: m.agent_id)])
    return float(np.clip(alpha.weights @ scores, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Regret accounting
# ---------------------------------------------------------------------------


@dataclass
class RegretLedger:
    """Running totals for the expert-advice regret bound.

    ``games`` counts weight resets; each game contributes ``log(N)/eta`` and
    every round ``eta/8`` to the bound.
    """

    N: int
    eta: float
    mixture_loss: float = 0.0
    per_agent_loss: np.ndarray = field(default=None)  # type: ignore[assignment]
    rounds: int = 0
    games: int = 0

    def __post_init__(self) -> None:
        if self.per_agent_loss is None:
            self.per_agent_loss = np.zeros(self.N)

    def record(self, weights: np.ndarray, losses: np.ndarray) -> None:
        """Add rounds; ``weights``/``losses`` are (N,) or (rounds, N)."""
        W = np.atleast_2d(weights)
        L = np.atleast_2d(losses)
        self.mixture_loss += float(np.einsum("ti,ti->", W, L))
        self.per_agent_loss = self.per_agent_loss + L.sum(axis=0)
        self.rounds += L.shape[0]

    @property
    def bound(self) -> float:
        return self.games * math.log(self.N) / self.eta + self.eta * self.rounds / 8.0

    @property
    def regret(self) -> float:
        return self.mixture_loss - float(self.per_agent_loss.min())

    def to_dict(self) -> dict:
        return {
            "mixture_loss": self.mixture_loss,
            "per_agent_loss": [float(x) for x in self.per_agent_loss],
            "bound": self.bound,
            "slack": self.bound - self.regret,
            "regret": self.regret,
            "N": self.N,
            "eta": self.eta,
            "rounds": self.rounds,
            "games": self.games,
        }


def regret_check(ledger: RegretLedger, N: int | None = None, eta: float | None = None, T: int | None = None):
    """Return ``(holds, slack)`` for ``regret <= log(N)/eta + eta*T/8``.

    With explicit ``N``, ``eta`` and ``T`` the single-game bound is used;
    otherwise the ledger's own (possibly multi-game) bound.
    """
    if N is None:
        bound = ledger.bound
    else:
        bound = math.log(N) / eta + eta * T / 8.0
    slack = bound - ledger.regret
    return slack >= -1e-12, slack


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MessageBatch:
    """Messages for ``m`` rows; agents do not update within a debate, so one
    batch serves every round."""

    row_keys: tuple[str, ...]
    scores: np.ndarray  # (m, N) normalized
    conf: np.ndarray  # (m, N)
    attributions: np.ndarray  # (m, N, d) raw occlusion attributions
    stability: np.ndarray  # (m, N)

    @property
    def m(self) -> int:
        return self.scores.shape[0]

    @property
    def N(self) -> int:
        return self.scores.shape[1]

    def messages(self, r: int) -> tuple[Message, ...]:
        return tuple(
            Message(i, float(self.scores[r, i]), float(self.conf[r, i]), Evidence(self.attributions[r, i]))
            for i in range(self.N)
        )

    def take(self, idx) -> MessageBatch:
        idx = np.asarray(idx, dtype=np.int64)
        return MessageBatch(
            tuple(self.row_keys[k] for k in idx.tolist()),
            self.scores[idx],
            self.conf[idx],
            self.attributions[idx],
            self.stability[idx],
        )


def build_messages(
    pool,
    normalizers,
    X: np.ndarray,
    config: MadConfig,
    row_keys: Sequence | None = None,
    chunk: int = 256,
) -> MessageBatch:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    m = X.shape[0]
    keys = tuple(str(k) for k in (range(m) if row_keys is None else row_keys))
    if len(keys) != m:
        raise DimensionMismatch("row_keys length differs from row count")
    N, d = pool.N, pool.d
    scores = np.empty((m, N))
    conf = np.empty((m, N))
    attr = np.empty((m, N, d))
    stab = np.empty((m, N))
    for lo in range(0, m, chunk):
        sl = slice(lo, min(lo + chunk, m))
        Xc = X[sl]
        scores[sl] = np.clip(normalize_matrix(normalizers, pool.raw_scores(Xc)), 0.0, 1.0)
        conf[sl] = pool.confidence(Xc)
        attr[sl] = pool.occlusion(Xc)
        stab[sl] = stability_losses(pool, normalizers, Xc, config.perturbation, config.seed, keys[sl])
    return MessageBatch(keys, scores, conf, attr, stab)


# ---------------------------------------------------------------------------
# Debate
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DebateResult:
    batch: MessageBatch
    weights: np.ndarray  # (T+1, m, N)
    total: np.ndarray  # (T, m, N)
    pred: np.ndarray
    dispute: np.ndarray
    evidence: np.ndarray
    aggregate: np.ndarray  # (T, m)
    final: np.ndarray  # (m,)
    digest: str

    def trace(self, r: int) -> DebateTrace:
        msgs = self.batch.messages(r)
        rounds = []
        for t in range(self.total.shape[0]):
            rounds.append(
                RoundRecord(
                    messages=msgs,
                    losses=SynthesizedLoss(
                        self.total[t, r], pred=self.pred[t, r], dispute=self.dispute[t, r], evidence=self.evidence[t, r]
                    ),
                    weights_before=WeightVector(self.weights[t, r]),
                    weights_after=WeightVector(self.weights[t + 1, r]),
                    aggregate_score=float(self.aggregate[t, r]),
                )
            )
        return DebateTrace(self.batch.row_keys[r], tuple(rounds), float(self.final[r]), self.digest)

    def traces(self) -> list[DebateTrace]:
        return [self.trace(r) for r in range(self.batch.m)]


def _pred_term(batch: MessageBatch, config: MadConfig, labels: np.ndarray | None) -> np.ndarray:
    pred = batch.stability
    if config.supervised and labels is not None:
        lab = np.asarray(labels, dtype=np.float64)
        has = np.isfinite(lab) & (lab >= 0)
        sup = pred_loss_supervised(batch.scores, np.where(has, lab, 0.0)[:, None], config.epsilon)
        pred = np.where(has[:, None], sup, pred)
    return pred


def _final(config: MadConfig, W_next: np.ndarray, W_last: np.ndarray, scores: np.ndarray) -> np.ndarray:
    W = W_next if config.final_weights == "post" else W_last
    return np.clip(np.einsum("mi,mi->m", W, scores), 0.0, 1.0)


def debate_batch(
    batch: MessageBatch,
    config: MadConfig,
    labels: np.ndarray | None = None,
    start: np.ndarray | None = None,
) -> DebateResult:
    """Run ``config.rounds_T`` rounds independently for every row.

    ``labels`` may hold -1 (or NaN) for rows without a label. ``start`` gives
    per-row initial weights (default: the config's start weights).
    """
    m, N = batch.m, batch.N
    T = config.rounds_T
    if start is None:
        start = np.broadcast_to(config.start_weights(N).weights, (m, N))
    W = np.empty((T + 1, m, N))
    W[0] = start
    unit = unit_rows(batch.attributions)
    pred = _pred_term(batch, config, labels)
    total = np.empty((T, m, N))
    predc = np.empty((T, m, N))
    disp = np.empty((T, m, N))
    evid = np.empty((T, m, N))
    agg = np.empty((T, m))
    for t in range(T):
        total[t], predc[t], disp[t], evid[t], agg[t] = synthesize_arrays(
            W[t], batch.scores, batch.conf, unit, pred, config.lam, config.gamma
        )
        W[t + 1] = eg_rows(W[t], total[t], config.eta)
    agg = np.clip(agg, 0.0, 1.0)
    final = _final(config, W[T], W[T - 1], batch.scores)
    return DebateResult(batch, W, total, predc, disp, evid, agg, final, config.digest())


def debate(row, pool, normalizers, config: MadConfig, label: int | None = None, row_id: str = "0"):
    """Debate a single preprocessed row; returns ``(final_score, trace)``."""
    batch = build_messages(pool, normalizers, np.atleast_2d(row), config, [row_id])
    labels = None if label is None else np.array([label], dtype=np.float64)
    res = debate_batch(batch, config, labels)
    return float(res.final[0]), res.trace(0)


@dataclass(eq=False)
class StreamResult:
    scores: np.ndarray
    result: DebateResult | None
    ledger: RegretLedger

    def traces(self) -> list[DebateTrace]:
        return [] if self.result is None else self.result.traces()


def run_batch(
    batch: MessageBatch,
    config: MadConfig,
    mode: str = "per_input_reset",
    labels: np.ndarray | None = None,
    start: np.ndarray | None = None,
) -> StreamResult:
    """Debate a whole batch in either stream mode, with regret bookkeeping.

    ``start`` overrides the initial weights of a persistent stream, e.g. to
    continue from weights learned on an earlier stream.
    """
    if mode not in STREAM_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    N = batch.N
    ledger = RegretLedger(N=N, eta=config.eta)
    if batch.m == 0:
        return StreamResult(np.zeros(0), None, ledger)
    if mode == "per_input_reset":
        res = debate_batch(batch, config, labels)
        ledger.games = batch.m
        for t in range(config.rounds_T):
            ledger.record(res.weights[t], res.total[t])
        return StreamResult(res.final, res, ledger)

    ledger.games = 1
    T = config.rounds_T
    alpha = config.start_weights(N).weights[None, :] if start is None else np.asarray(start, dtype=np.float64)[None, :]
    parts = []
    for r in range(batch.m):
        sub = batch.take([r])
        res = debate_batch(sub, config, None if labels is None else np.asarray(labels)[[r]], start=alpha)
        for t in range(T):
            ledger.record(res.weights[t], res.total[t])
        alpha = res.weights[T]
        parts.append(res)
    res = DebateResult(
        batch,
        np.concatenate([p.weights for p in parts], axis=1),
        np.concatenate([p.total for p in parts], axis=1),
        np.concatenate([p.pred for p in parts], axis=1),
        np.concatenate([p.dispute for p in parts], axis=1),
        np.concatenate([p.evidence for p in parts], axis=1),
        np.concatenate([p.aggregate for p in parts], axis=1),
        np.concatenate([p.final for p in parts]),
        config.digest(),
    )
    return StreamResult(res.final, res, ledger)


def run_stream(
    X: np.ndarray,
    pool,
    normalizers,
    config: MadConfig,
    mode: str = "per_input_reset",
    labels: np.ndarray | None = None,
    row_keys: Sequence | None = None,
) -> StreamResult:
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        return StreamResult(np.zeros(0), None, RegretLedger(N=pool.N, eta=config.eta))
    batch = build_messages(pool, normalizers, X, config, row_keys)
    return run_batch(batch, config, mode, labels)


# ---------------------------------------------------------------------------
# Regret simulation harness
# ---------------------------------------------------------------------------

LOSS_GENERATORS = ("uniform", "bernoulli", "adversarial", "zeros", "psi")


def _psi_losses(rng: np.random.Generator, alpha: np.ndarray, lam: float, gamma: float, d: int = 6) -> np.ndarray:
    N = alpha.size
    scores = rng.random((1, N))
    conf = rng.random((1, N))
    attr = rng.standard_normal((1, N, d)) * (rng.random((1, N, 1)) > 0.1)
    pred = rng.random((1, N)) * rng.choice([0.2, 1.0, 3.0])
    total, *_ = synthesize_arrays(alpha[None, :], scores, conf, unit_rows(attr), pred, lam, gamma)
    return total[0]


def simulate_regret(
    N: int,
    eta: float,
    T: int,
    generator: str = "uniform",
    seed: int = 0,
    lam: float = 0.5,
    gamma: float = 0.5,
) -> tuple[RegretLedger, np.ndarray]:
    """Run EG from uniform weights on ``T`` generated loss vectors.

    Returns the ledger and the per-round cumulative regret curve.
    """
    if generator not in LOSS_GENERATORS:
        raise ValueError(f"unknown generator {generator!r}")
    rng = stream(seed, "regret", generator, N, T)
    alpha = np.full(N, 1.0 / N)
    ledger = RegretLedger(N=N, eta=eta, games=1)
    curve = np.empty(T)
    for t in range(T):
        if generator == "uniform":
            ell = rng.random(N)
        elif generator == "bernoulli":
            ell = (rng.random(N) < 0.5).astype(np.float64)
        elif generator == "adversarial":
            ell = np.ones(N)
            ell[int(np.argmax(alpha))] = 0.0
        elif generator == "zeros":
            ell = np.zeros(N)
        else:
            ell = _psi_losses(rng, alpha, lam, gamma)
        ledger.record(alpha, ell)
        alpha = eg_rows(alpha, ell, eta)
        curve[t] = ledger.regret
    return ledger, curve
