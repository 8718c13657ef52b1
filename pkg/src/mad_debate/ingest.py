"""CSV intake, leakage-free preprocessing, seeded splits, corruptions and slices."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import SPLIT_TAGS, UNKNOWN_CATEGORY, ColumnSpec, DatasetTable, MadError, stream

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-12
MIN_SLICE_ROWS = 10
MAX_PATTERNS = 8


class ParseError(MadError):
    def __init__(self, row: int, col: str, msg: str = "") -> None:
        self.row, self.col = row, col
        super().__init__(f"row {row}, column {col!r}: {msg or 'cannot parse cell'}")


class SchemaMismatch(MadError):
    pass


class EmptyTrain(MadError):
    pass


class InsufficientRows(MadError):
    pass


class KindColumnMismatch(MadError):
    pass


class EmptySlice(UserWarning):
    pass


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv(
    path: str | Path,
    schema: Sequence[ColumnSpec] | None = None,
    label_column: str | None = "label",
    categorical: Sequence[str] = (),
) -> DatasetTable:
    """Read a comma-separated file with a header row into a ``DatasetTable``.

    Empty fields become missing cells. Without a schema, a column is numeric
    when every non-empty field parses as a float, unless it is listed in
    ``categorical``. When ``label_column`` is present in the header its values
    must be 0 or 1 (empty is not allowed).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaMismatch(f"{path}: empty file, header row required") from None
        records = [row for row in reader if row]

    for i, rec in enumerate(records, start=1):
        if len(rec) != len(header):
            raise ParseError(i, "*", f"expected {len(header)} fields, found {len(rec)}")

    label_idx = header.index(label_column) if label_column and label_column in header else None
    feat_idx = [j for j in range(len(header)) if j != label_idx]
    feat_names = [header[j] for j in feat_idx]

    if schema is not None:
        schema = list(schema)
        if [c.name for c in schema] != feat_names:
            raise SchemaMismatch(f"header {feat_names} does not match schema {[c.name for c in schema]}")
        columns = schema
    else:
        columns = []
        for j, name in zip(feat_idx, feat_names):
            cells = [rec[j].strip() for rec in records if rec[j].strip() != ""]
            if name not in categorical and all(_is_float(c) for c in cells):
                columns.append(ColumnSpec(name, "numeric"))
            else:
                cats = tuple(dict.fromkeys(cells)) or ("",)
                columns.append(ColumnSpec(name, "categorical", cats))

    n, p = len(records), len(columns)
    values = np.zeros((n, p))
    missing = np.zeros((n, p), dtype=bool)
    for c, (j, spec) in enumerate(zip(feat_idx, columns)):
        lookup = {cat: k for k, cat in enumerate(spec.categories)}
        for i, rec in enumerate(records):
            cell = rec[j].strip()
            if cell == "":
                missing[i, c] = True
            elif spec.kind == "numeric":
                try:
                    values[i, c] = float(cell)
                except ValueError:
                    raise ParseError(i + 1, spec.name, f"{cell!r} is not a number") from None
                if not math.isfinite(values[i, c]):
                    raise ParseError(i + 1, spec.name, "non-finite value")
            else:
                code = lookup.get(cell)
                if code is None:
                    warnings.warn(f"column {spec.name!r}: category {cell!r} not in schema, mapped to unknown")
                    code = UNKNOWN_CATEGORY
                values[i, c] = code

    labels = None
    if label_idx is not None:
        labels = np.zeros(n, dtype=np.int8)
        for i, rec in enumerate(records):
            cell = rec[label_idx].strip()
            if cell not in ("0", "1", "0.0", "1.0"):
                raise SchemaMismatch(f"row {i + 1}: label {cell!r} is not 0 or 1")
            labels[i] = int(float(cell))
    return DatasetTable(tuple(columns), values, missing, labels)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NumericStats:
    mean: float
    std: float
    median: float


@dataclass(frozen=True)
class CategoricalStats:
    mode: int
    codes: tuple[int, ...]  # train-observed category codes, in one-hot order


@dataclass(frozen=True)
class PreprocessModel:
    columns: tuple[ColumnSpec, ...]
    stats: tuple[NumericStats | CategoricalStats, ...]
    add_missing_indicators: bool = True

    @property
    def feature_names(self) -> list[str]:
        names = []
        for spec, st in zip(self.columns, self.stats):
            if isinstance(st, NumericStats):
                names.append(spec.name)
            else:
                names.extend(f"{spec.name}={spec.categories[c]}" for c in st.codes)
                names.append(f"{spec.name}=<unknown>")
        if self.add_missing_indicators:
            names.extend(f"{spec.name}_missing" for spec in self.columns)
        return names

    @property
    def dim(self) -> int:
        return len(self.feature_names)

    def train_std(self) -> dict[str, float]:
        return {c.name: st.std for c, st in zip(self.columns, self.stats) if isinstance(st, NumericStats)}


def fit_preprocess(train_view: DatasetTable, add_missing_indicators: bool = True) -> PreprocessModel:
    """Fit imputation, standardization and one-hot tables on training rows only.

    Standard deviations are population (divide by n), floored at 1e-12.
    """
    if train_view.rows == 0:
        raise EmptyTrain("training view has no rows")
    stats: list[NumericStats | CategoricalStats] = []
    for j, spec in enumerate(train_view.columns):
        observed = train_view.values[~train_view.missing[:, j], j]
        if spec.kind == "numeric":
            if observed.size == 0:
                warnings.warn(f"column {spec.name!r} is entirely missing in train; using mean 0, median 0")
                stats.append(NumericStats(0.0, STD_FLOOR, 0.0))
                continue
            stats.append(
                NumericStats(
                    mean=float(observed.mean()),
                    std=max(float(observed.std()), STD_FLOOR),
                    median=float(np.median(observed)),
                )
            )
        else:
            codes = observed.astype(np.int64)
            codes = codes[codes != UNKNOWN_CATEGORY]
            if codes.size == 0:
                warnings.warn(f"column {spec.name!r} has no known categories in train")
                stats.append(CategoricalStats(UNKNOWN_CATEGORY, ()))
                continue
            counts = Counter(codes.tolist())
            top = max(counts.values())
            mode = min(c for c, k in counts.items() if k == top)
            stats.append(CategoricalStats(mode, tuple(sorted(counts))))
    return PreprocessModel(train_view.columns, tuple(stats), add_missing_indicators)


def apply_preprocess(model: PreprocessModel, view: DatasetTable) -> tuple[np.ndarray, np.ndarray]:
    """Transform ``view`` into a dense feature matrix.

    Returns ``(X, indicators)`` where ``indicators`` is the (rows, columns)
    missingness mask as floats. When the model adds indicators they are also
    the trailing block of ``X``.
    """
    if tuple(c.name for c in view.columns) != tuple(c.name for c in model.columns):
        raise SchemaMismatch("view columns do not match the preprocessing model")
    blocks = []
    for j, (spec, st) in enumerate(zip(model.columns, model.stats)):
        col = view.values[:, j]
        miss = view.missing[:, j]
        if isinstance(st, NumericStats):
            filled = np.where(miss, st.median, col)
            blocks.append(((filled - st.mean) / st.std)[:, None])
        else:
            codes = np.where(miss, st.mode, col).astype(np.int64)
            onehot = np.zeros((view.rows, len(st.codes) + 1))
            pos = {c: k for k, c in enumerate(st.codes)}
            slot = np.array([pos.get(c, len(st.codes)) for c in codes.tolist()], dtype=np.int64)
            onehot[np.arange(view.rows), slot] = 1.0
            blocks.append(onehot)
    indicators = view.missing.astype(np.float64)
    if model.add_missing_indicators:
        blocks.append(indicators)
    X = np.hstack(blocks) if blocks else np.zeros((view.rows, 0))
    return X, indicators


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def _allocate(n: int, fracs: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of ``n`` items to ``fracs``."""
    raw = [f * n for f in fracs]
    sizes = [int(math.floor(r + 1e-9)) for r in raw]
    rest = n - sum(sizes)
    order = sorted(range(len(fracs)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[:rest]:
        sizes[k] += 1
    return sizes


def split(
    dataset: DatasetTable,
    fractions: Mapping[str, float],
    seed: int,
    stratify_on_labels: bool = True,
) -> DatasetTable:
    """Tag every row with a split after a seeded shuffle.

    The calibration split holds normals only: anomalies that would land there
    are moved to train.
    """
    fr = [float(fractions.get(tag, 0.0)) for tag in SPLIT_TAGS]
    extra = set(fractions) - set(SPLIT_TAGS)
    if extra:
        raise ValueError(f"unknown split names {sorted(extra)}")
    if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be nonnegative and sum to 1, got {sum(fr)!r}")
    n = dataset.rows
    rng = stream(seed, "split")
    perm = rng.permutation(n)
    tags = np.empty(n, dtype=object)
    labels = dataset.labels

    def assign(idx: np.ndarray, fracs: Sequence[float]) -> None:
        start = 0
        for tag, size in zip(SPLIT_TAGS, _allocate(idx.size, fracs)):
            tags[idx[start : start + size]] = tag
            start += size

    if stratify_on_labels and labels is not None:
        normals = perm[labels[perm] == 0]
        anomalies = perm[labels[perm] == 1]
        assign(normals, fr)
        assign(anomalies, [fr[0] + fr[2], fr[1], 0.0, fr[3]])
    else:
        assign(perm, fr)
        if labels is not None:
            tags[(tags == "calibration") & (labels == 1)] = "train"

    for tag, f in zip(SPLIT_TAGS, fr):
        if f > 0 and not np.any(tags == tag):
            raise InsufficientRows(f"split {tag!r} is empty with fraction {f}")
    return dataset.with_tags(tags)


def write_split_sidecar(path: str | Path, table: DatasetTable) -> None:
    if table.split_tag is None:
        raise ValueError("table has no split tags")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_index", "split_tag"])
        for rid, tag in zip(table.row_ids.tolist(), table.split_tag.tolist()):
            w.writerow([rid, tag])


# ---------------------------------------------------------------------------
# Corruptions
# ---------------------------------------------------------------------------

CORRUPTION_KINDS = ("gaussian_noise", "missing_injection", "scaling_drift", "categorical_perturbation")
_NUMERIC_ONLY = {"gaussian_noise", "scaling_drift"}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: float
    target_columns: tuple[str, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must lie in [0, 1]")
        if self.target_columns is not None:
            object.__setattr__(self, "target_columns", tuple(self.target_columns))


def _targets(view: DatasetTable, spec: CorruptionSpec) -> list[int]:
    wanted = None
    if spec.kind in _NUMERIC_ONLY:
        wanted = "numeric"
    elif spec.kind == "categorical_perturbation":
        wanted = "categorical"
    if spec.target_columns is None:
        return [j for j, c in enumerate(view.columns) if wanted is None or c.kind == wanted]
    names = view.column_names
    idx = []
    for name in spec.target_columns:
        if name not in names:
            raise KindColumnMismatch(f"no column named {name!r}")
        j = names.index(name)
        if wanted is not None and view.columns[j].kind != wanted:
            raise KindColumnMismatch(f"{spec.kind} cannot target {view.columns[j].kind} column {name!r}")
        idx.append(j)
    return idx


def corrupt(view: DatasetTable, spec: CorruptionSpec, model: PreprocessModel | None = None) -> DatasetTable:
    """Apply one test-time corruption to raw (pre-standardization) cells.

    ``gaussian_noise`` needs ``model`` for the training standard deviations.
    Severity 0 returns the input unchanged for every kind.
    """
    cols = _targets(view, spec)
    if spec.severity == 0.0 or not cols:
        return view
    values = np.array(view.values)
    missing = np.array(view.missing)
    rng = stream(spec.seed, "corrupt", spec.kind)
    sub_v = values[:, cols]
    sub_m = missing[:, cols]
    if spec.kind == "gaussian_noise":
        if model is None:
            raise ValueError("gaussian_noise needs the fitted preprocessing model for train std")
        std = model.train_std()
        scale = np.array([std[view.columns[j].name] for j in cols])
        noise = rng.standard_normal(sub_v.shape) * (spec.severity * scale)
        sub_v = np.where(sub_m, sub_v, sub_v + noise)
    elif spec.kind == "missing_injection":
        sub_m = sub_m | (rng.random(sub_v.shape) < spec.severity)
    elif spec.kind == "scaling_drift":
        sub_v = sub_v * (1.0 + spec.severity)
    else:
        flip = (rng.random(sub_v.shape) < spec.severity) & ~sub_m
        sub_v = np.where(flip, float(UNKNOWN_CATEGORY), sub_v)
    values[:, cols] = sub_v
    missing[:, cols] = sub_m
    return view.with_cells(values, missing)


# ---------------------------------------------------------------------------
# Slices
# ---------------------------------------------------------------------------

SLICE_RULES = ("missingness_pattern", "feature_quantile", "custom")


@dataclass(frozen=True)
class SliceSpec:
    name: str
    rule: str = "feature_quantile"
    column: str | None = None
    bin_count: int = 4
    row_sets: tuple[tuple[int, ...], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.rule not in SLICE_RULES:
            raise ValueError(f"unknown slice rule {self.rule!r}")
        if self.rule == "feature_quantile" and (self.column is None or self.bin_count < 1):
            raise ValueError("feature_quantile needs a column and bin_count >= 1")


@dataclass(frozen=True)
class Slice:
    name: str
    rows: np.ndarray  # positions into the sliced view


def _merge_small(slices: list[Slice]) -> list[Slice]:
    out = list(slices)
    while len(out) > 1:
        small = [k for k, s in enumerate(out) if s.rows.size < MIN_SLICE_ROWS]
        if not small:
            break
        k = small[0]
        nb = k - 1 if k > 0 else k + 1
        warnings.warn(
            f"slice {out[k].name!r} has {out[k].rows.size} rows; merged into {out[nb].name!r}", EmptySlice
        )
        lo, hi = min(k, nb), max(k, nb)
        merged = Slice(f"{out[lo].name}+{out[hi].name}", np.sort(np.concatenate([out[lo].rows, out[hi].rows])))
        out[lo : hi + 1] = [merged]
    return out


def make_slices(view: DatasetTable, spec: SliceSpec, train_view: DatasetTable | None = None) -> list[Slice]:
    """Partition the rows of ``view`` into named slices.

    Quantile edges come from ``train_view`` (falls back to ``view``). Slices
    with fewer than 10 rows are merged into a neighbour with a warning.
    """
    if spec.rule == "custom":
        slices = [Slice(f"{spec.name}[{k}]", np.array(sorted(rs), dtype=np.int64)) for k, rs in enumerate(spec.row_sets)]
        for s in slices:
            if s.rows.size and (s.rows.min() < 0 or s.rows.max() >= view.rows):
                raise IndexError("custom slice row out of range")
    elif spec.rule == "missingness_pattern":
        sigs = [row.tobytes() for row in view.missing]
        counts = Counter(sigs)
        ranked = sorted(counts, key=lambda s: (-counts[s], s))
        keep = {s: k for k, s in enumerate(ranked[:MAX_PATTERNS])}
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(sigs):
            groups.setdefault(keep.get(s, MAX_PATTERNS), []).append(i)
        slices = []
        for k in sorted(groups):
            if k == MAX_PATTERNS:
                label = "other"
            else:
                pattern = np.frombuffer(ranked[k], dtype=bool)
                absent = [view.columns[j].name for j in np.flatnonzero(pattern)]
                label = "missing:" + (",".join(absent) if absent else "none")
            slices.append(Slice(label, np.array(groups[k], dtype=np.int64)))
    else:
        ref = train_view if train_view is not None else view
        names = view.column_names
        if spec.column not in names:
            raise ValueError(f"no column named {spec.column!r}")
        j = names.index(spec.column)
        obs = ref.values[~ref.missing[:, j], j]
        if obs.size == 0:
            raise ValueError(f"column {spec.column!r} has no observed reference values")
        edges = np.quantile(obs, np.arange(1, spec.bin_count) / spec.bin_count)
        bins = np.searchsorted(edges, view.values[:, j], side="right")
        slices = []
        for b in range(spec.bin_count):
            rows = np.flatnonzero((bins == b) & ~view.missing[:, j])
            slices.append(Slice(f"{spec.column}:q{b}", rows))
        miss_rows = np.flatnonzero(view.missing[:, j])
        slices = [s for s in slices if s.rows.size]
        if miss_rows.size:
            slices.append(Slice(f"{spec.column}:missing", miss_rows))
    return _merge_small([s for s in slices if s.rows.size] or slices)
