"""Shared domain types, seeded random streams, and the trace file format."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

SIMPLEX_TOL = 1e-9
RENORM_BAND = 1e-6

SPLIT_TAGS = ("train", "validation", "calibration", "test")
COLUMN_KINDS = ("numeric", "categorical")

# Category code for a categorical cell routed to the "unknown" bucket.
UNKNOWN_CATEGORY = -1


class MadError(Exception):
    """Base class for all errors raised by this package."""


class NegativeWeight(MadError):
    pass


class NotNormalizable(MadError):
    pass


class MalformedTrace(MadError):
    pass


class DimensionMismatch(MadError):
    pass


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def _label_key(label: Any) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed: int, *labels: Any) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *labels)``.

    Every stochastic step in the package draws from its own labelled stream so
    that results do not depend on call order or batching.
    """
    key = tuple(_label_key(lbl) for lbl in labels)
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# Tabular data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "numeric"
    categories: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in COLUMN_KINDS:
            raise ValueError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and len(self.categories) < 1:
            raise ValueError(f"categorical column {self.name!r} needs at least one category")
        object.__setattr__(self, "categories", tuple(self.categories))


@dataclass(frozen=True, eq=False)
class DatasetTable:
    """Row-major table with an explicit missingness mask.

    ``values`` holds floats for numeric columns and category codes (indices into
    ``ColumnSpec.categories``, or ``UNKNOWN_CATEGORY``) for categorical ones.
    Cells flagged in ``missing`` carry no value; their slot in ``values`` is 0.
    """

    columns: tuple[ColumnSpec, ...]
    values: np.ndarray
    missing: np.ndarray
    labels: np.ndarray | None = None
    split_tag: np.ndarray | None = None
    row_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            raise ValueError("column names must be unique")
        values = np.array(self.values, dtype=np.float64, copy=True)
        missing = np.array(self.missing, dtype=bool, copy=True)
        if values.ndim != 2 or values.shape[1] != len(cols):
            raise ValueError(f"values must have shape (rows, {len(cols)}), got {values.shape}")
        if missing.shape != values.shape:
            raise ValueError("missing mask must match values shape")
        values[missing] = 0.0
        if not np.all(np.isfinite(values)):
            raise ValueError("non-missing cells must be finite")
        n = values.shape[0]
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (n,):
                raise ValueError("labels must have one entry per row")
            if not np.all((labels == 0) | (labels == 1)):
                raise ValueError("labels must be exactly 0 or 1")
            labels = labels.astype(np.int8)
        tags = self.split_tag
        if tags is not None:
            tags = np.asarray(tags, dtype=object)
            if tags.shape != (n,):
                raise ValueError("split_tag must have one entry per row")
            bad = set(tags.tolist()) - set(SPLIT_TAGS)
            if bad:
                raise ValueError(f"unknown split tags {sorted(bad)}")
        row_ids = np.arange(n) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64)
        if row_ids.shape != (n,):
            raise ValueError("row_ids must have one entry per row")
        for arr in (values, missing, labels, tags, row_ids):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing", missing)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "split_tag", tags)
        object.__setattr__(self, "row_ids", row_ids)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def take(self, index: Sequence[int] | np.ndarray) -> DatasetTable:
        idx = np.asarray(index, dtype=np.int64)
        return DatasetTable(
            columns=self.columns,
            values=self.values[idx],
            missing=self.missing[idx],
            labels=None if self.labels is None else self.labels[idx],
            split_tag=None if self.split_tag is None else self.split_tag[idx],
            row_ids=self.row_ids[idx],
        )

    def view(self, tag: str) -> DatasetTable:
        if self.split_tag is None:
            raise ValueError("table has no split tags")
        return self.take(np.flatnonzero(self.split_tag == tag))

    def with_tags(self, tags: np.ndarray) -> DatasetTable:
        return DatasetTable(self.columns, self.values, self.missing, self.labels, tags, self.row_ids)

    def with_cells(self, values: np.ndarray, missing: np.ndarray) -> DatasetTable:
        return DatasetTable(self.columns, values, missing, self.labels, self.split_tag, self.row_ids)


# ---------------------------------------------------------------------------
# Debate types
# ---------------------------------------------------------------------------


def _frozen_vector(x: Iterable[float] | np.ndarray) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Evidence:
    attribution: np.ndarray
    counterfactual: np.ndarray | None = None
    rationale: str | None = None

    def __post_init__(self) -> None:
        a = _frozen_vector(self.attribution)
        if not np.all(np.isfinite(a)):
            raise ValueError("attribution entries must be finite")
        object.__setattr__(self, "attribution", a)
        if self.counterfactual is not None:
            cf = _frozen_vector(self.counterfactual)
            if cf.shape != a.shape:
                raise DimensionMismatch("counterfactual must match attribution length")
            object.__setattr__(self, "counterfactual", cf)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Evidence):
            return NotImplemented
        cf_eq = (self.counterfactual is None and other.counterfactual is None) or (
            self.counterfactual is not None
            and other.counterfactual is not None
            and np.array_equal(self.counterfactual, other.counterfactual)
        )
        return (
            np.array_equal(self.attribution, other.attribution)
            and cf_eq
            and self.rationale == other.rationale
        )


@dataclass(frozen=True)
class Message:
    agent_id: int
    score: float
    confidence: float
    evidence: Evidence

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        if self.agent_id < 0:
            raise ValueError("agent_id must be nonnegative")


@dataclass(frozen=True, eq=False)
class WeightVector:
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = _frozen_vector(self.weights)
        if w.size == 0:
            raise NotNormalizable("weight vector is empty")
        if np.any(w < 0):
            raise NegativeWeight(f"negative weight in {w.tolist()}")
        if abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise NotNormalizable(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WeightVector):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    @classmethod
    def uniform(cls, n: int) -> WeightVector:
        return cls(np.full(n, 1.0 / n))


def validate_weight_vector(w: Sequence[float] | np.ndarray) -> WeightVector:
    """Check ``w`` is on the simplex, renormalizing tiny drift.

    Vectors summing to 1 within 1e-9 pass unchanged. Sums within 1e-6 are
    divided through by the sum; anything further out raises ``NotNormalizable``.
    """
    arr = np.asarray(w, dtype=np.float64).reshape(-1)
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise NotNormalizable("weights must be a nonempty finite vector")
    if np.any(arr < 0):
        raise NegativeWeight(f"negative weight in {arr.tolist()}")
    total = float(arr.sum())
    if abs(total - 1.0) <= SIMPLEX_TOL:
        return WeightVector(arr)
    if total <= 0 or abs(total - 1.0) > RENORM_BAND:
        raise NotNormalizable(f"weights sum to {total!r}")
    return WeightVector(arr / total)


@dataclass(frozen=True, eq=False)
class SynthesizedLoss:
    """Bounded per-agent losses plus the unclipped component breakdown."""

    losses: np.ndarray
    pred: np.ndarray | None = None
    dispute: np.ndarray | None = None
    evidence: np.ndarray | None = None

    def __post_init__(self) -> None:
        loss = _frozen_vector(self.losses)
        if not np.all((loss >= 0.0) & (loss <= 1.0)):
            raise ValueError(f"synthesized losses must lie in [0, 1], got {loss.tolist()}")
        object.__setattr__(self, "losses", loss)
        parts = [self.pred, self.dispute, self.evidence]
        if any(p is not None for p in parts):
            if any(p is None for p in parts):
                raise ValueError("component breakdown must be all-or-nothing")
            for name in ("pred", "dispute", "evidence"):
                v = _frozen_vector(getattr(self, name))
                if v.shape != loss.shape:
                    raise DimensionMismatch(f"{name} component length mismatch")
                object.__setattr__(self, name, v)

    @property
    def has_components(self) -> bool:
        return self.pred is not None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SynthesizedLoss):
            return NotImplemented

        def same(a, b):
            return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))

        return all(same(getattr(self, k), getattr(other, k)) for k in ("losses", "pred", "dispute", "evidence"))


@dataclass(frozen=True)
class CoordinatorState:
    round: int
    weights: WeightVector

    def __post_init__(self) -> None:
        if self.round < 1:
            raise ValueError("round index starts at 1")


@dataclass(frozen=True)
class PerturbationSpec:
    noise_scale: float = 0.05
    samples_K: int = 8

    def __post_init__(self) -> None:
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.samples_K < 1:
            raise ValueError("samples_K must be >= 1")


@dataclass(frozen=True)
class MadConfig:
    eta: float = 1.0
    lam: float = 0.5
    gamma: float = 0.5
    rounds_T: int = 1
    epsilon: float = 1e-6
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    supervised: bool = False
    seed: int = 0
    final_weights: str = "post"
    initial_weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.eta > 1.0:
            warnings.warn(f"eta={self.eta} lies outside (0, 1]; the regret guarantee does not apply", stacklevel=2)
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be >= 0")
        if self.rounds_T < 1:
            raise ValueError("rounds_T must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.final_weights not in ("pre", "post"):
            raise ValueError("final_weights must be 'pre' or 'post'")
        if isinstance(self.perturbation, dict):
            object.__setattr__(self, "perturbation", PerturbationSpec(**self.perturbation))
        if self.initial_weights is not None:
            validate_weight_vector(self.initial_weights)
            object.__setattr__(self, "initial_weights", tuple(float(w) for w in self.initial_weights))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def start_weights(self, n: int) -> WeightVector:
        if self.initial_weights is None:
            return WeightVector.uniform(n)
        if len(self.initial_weights) != n:
            raise DimensionMismatch(f"initial_weights has {len(self.initial_weights)} entries for {n} agents")
        return validate_weight_vector(self.initial_weights)


@dataclass(frozen=True)
class RoundRecord:
    messages: tuple[Message, ...]
    losses: SynthesizedLoss
    weights_before: WeightVector
    weights_after: WeightVector
    aggregate_score: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))


@dataclass(frozen=True)
class DebateTrace:
    input_id: str
    rounds: tuple[RoundRecord, ...]
    final_score: float
    config_digest: str

    def __post_init__(self) -> None:
        rounds = tuple(self.rounds)
        if len(rounds) < 1:
            raise ValueError("a trace needs at least one round")
        if not 0.0 <= self.final_score <= 1.0:
            raise ValueError("final_score must lie in [0, 1]")
        last = rounds[-1]
        scores = np.array([m.score for m in last.messages])
        post = float(last.weights_after.weights @ scores)
        # final_weights="pre" reproduces the round's own aggregate instead
        if abs(self.final_score - post) > 1e-9 and abs(self.final_score - last.aggregate_score) > 1e-9:
            raise ValueError("final_score does not match the last round's weighted score")
        object.__setattr__(self, "rounds", rounds)

    @property
    def T(self) -> int:
        return len(self.rounds)


# ---------------------------------------------------------------------------
# Trace serialization
# ---------------------------------------------------------------------------


def _num(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError("trace numbers must be finite")
    return format(x, ".17g")


def _arr(xs: Iterable[float]) -> str:
    return "[" + ",".join(_num(x) for x in xs) + "]"


def _message_json(m: Message) -> str:
    parts = [
        f'"agent_id":{int(m.agent_id)}',
        f'"score":{_num(m.score)}',
        f'"confidence":{_num(m.confidence)}',
        f'"attribution":{_arr(m.evidence.attribution)}',
        f'"rationale":{json.dumps(m.evidence.rationale)}',
    ]
    if m.evidence.counterfactual is not None:
        parts.append(f'"counterfactual":{_arr(m.evidence.counterfactual)}')
    return "{" + ",".join(parts) + "}"


def _round_json(r: RoundRecord) -> str:
    if not r.losses.has_components:
        raise ValueError("trace rounds need the loss component breakdown")
    losses = (
        f'{{"total":{_arr(r.losses.losses)},"pred":{_arr(r.losses.pred)},'
        f'"dispute":{_arr(r.losses.dispute)},"evidence":{_arr(r.losses.evidence)}}}'
    )
    return (
        "{"
        f'"messages":[{",".join(_message_json(m) for m in r.messages)}],'
        f'"losses":{losses},'
        f'"weights_before":{_arr(r.weights_before.weights)},'
        f'"weights_after":{_arr(r.weights_after.weights)},'
        f'"aggregate_score":{_num(r.aggregate_score)}'
        "}"
    )


def trace_to_json(t: DebateTrace) -> str:
    """One-line JSON object; keys in schema order, floats at 17 significant digits."""
    return (
        "{"
        f'"input_id":{json.dumps(str(t.input_id))},'
        f'"config_digest":{json.dumps(t.config_digest)},'
        f'"final_score":{_num(t.final_score)},'
        f'"rounds":[{",".join(_round_json(r) for r in t.rounds)}]'
        "}"
    )


def serialize_trace(t: DebateTrace) -> bytes:
    return trace_to_json(t).encode("utf-8")


def _floats(v: Any, what: str) -> np.ndarray:
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise MalformedTrace(f"{what} must be a number array")
    return np.array(v, dtype=np.float64)


def _trace_from_obj(obj: Any) -> DebateTrace:
    try:
        if not isinstance(obj, dict):
            raise MalformedTrace("trace must be a JSON object")
        rounds = []
        for r in obj["rounds"]:
            msgs = []
            for m in r["messages"]:
                cf = m.get("counterfactual")
                rationale = m["rationale"]
                if rationale is not None and not isinstance(rationale, str):
                    raise MalformedTrace("rationale must be a string or null")
                msgs.append(
                    Message(
                        agent_id=int(m["agent_id"]),
                        score=float(m["score"]),
                        confidence=float(m["confidence"]),
                        evidence=Evidence(
                            attribution=_floats(m["attribution"], "attribution"),
                            counterfactual=None if cf is None else _floats(cf, "counterfactual"),
                            rationale=rationale,
                        ),
                    )
                )
            lo = r["losses"]
            rounds.append(
                RoundRecord(
                    messages=tuple(msgs),
                    losses=SynthesizedLoss(
                        losses=_floats(lo["total"], "losses.total"),
                        pred=_floats(lo["pred"], "losses.pred"),
                        dispute=_floats(lo["dispute"], "losses.dispute"),
                        evidence=_floats(lo["evidence"], "losses.evidence"),
                    ),
                    weights_before=WeightVector(_floats(r["weights_before"], "weights_before")),
                    weights_after=WeightVector(_floats(r["weights_after"], "weights_after")),
                    aggregate_score=float(r["aggregate_score"]),
                )
            )
        digest = obj["config_digest"]
        input_id = obj["input_id"]
        if not isinstance(digest, str) or not isinstance(input_id, str):
            raise MalformedTrace("input_id and config_digest must be strings")
        return DebateTrace(
            input_id=input_id,
            rounds=tuple(rounds),
            final_score=float(obj["final_score"]),
            config_digest=digest,
        )
    except MalformedTrace:
        raise
    except (KeyError, TypeError, ValueError, MadError) as exc:
        raise MalformedTrace(str(exc)) from exc


def parse_trace(data: bytes | str) -> DebateTrace:
    try:
        obj = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedTrace(f"invalid JSON: {exc}") from exc
    return _trace_from_obj(obj)


def write_traces(path, traces: Iterable[DebateTrace]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in traces:
            fh.write(trace_to_json(t))
            fh.write("\n")


def read_traces(path) -> list[DebateTrace]:
    with open(path, encoding="utf-8") as fh:
        return [parse_trace(line) for line in fh if line.strip()]


def dumps_report(obj: Any) -> str:
    """Deterministic pretty JSON for run-level reports."""
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"
