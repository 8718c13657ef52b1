"""Run configuration: one JSON document validated into dataclasses."""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

from .agents import DETECTOR_NAMES, PoolConfig
from .coordinator import LOSS_GENERATORS, STREAM_MODES
from .core import SPLIT_TAGS, MadConfig, MadError, PerturbationSpec
from .datasets import BUNDLED
from .ingest import CORRUPTION_KINDS, SLICE_RULES, SliceSpec
from .normalize import NORMALIZER_KINDS


class ConfigError(MadError):
    def __init__(self, path: str, msg: str) -> None:
        self.path = path
        super().__init__(f"{path}: {msg}")


DEFAULT_GRID = {
    "eta": [0.25, 0.5, 1.0],
    "lambda": [0.0, 0.25, 0.5, 1.0],
    "gamma": [0.0, 0.25, 0.5, 1.0],
    "rounds_T": [1, 2, 3],
}


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    name: str = "two_gaussian"
    path: str | None = None
    label_column: str | None = "label"
    categorical: tuple[str, ...] = ()
    protocol: str = "semi_supervised"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SplitSection:
    fractions: dict = field(
        default_factory=lambda: {"train": 0.6, "validation": 0.1, "calibration": 0.1, "test": 0.2}
    )
    stratify: bool = True
    export: bool = True


@dataclass(frozen=True)
class ConformalSection:
    enabled: bool = True
    alpha: float = 0.05


@dataclass(frozen=True)
class MetricsSection:
    fpr_budget: float = 0.01
    ece_bins: int = 15
    slices: tuple[SliceSpec, ...] = ()


@dataclass(frozen=True)
class RegretSection:
    N: int = 5
    eta: float = 0.5
    T: int = 1000
    generator: str = "uniform"
    seeds: int = 10
    lam: float = 0.5
    gamma: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    add_missing_indicators: bool = True
    split: SplitSection = field(default_factory=SplitSection)
    pool: PoolConfig = field(default_factory=PoolConfig)
    normalizer: str = "rank_percentile"
    mad: MadConfig = field(default_factory=MadConfig)
    mode: str = "per_input_reset"
    conformal: ConformalSection = field(default_factory=ConformalSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    output_dir: str = "out"
    write_traces: bool = True
    regret: RegretSection = field(default_factory=RegretSection)
    grid: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_GRID))
    sweep: dict = field(
        default_factory=lambda: {"kinds": list(CORRUPTION_KINDS), "severities": [0.0, 0.25, 0.5]}
    )


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------


def _section(raw: dict, key: str) -> dict:
    val = raw.get(key, {})
    if not isinstance(val, dict):
        raise ConfigError(key, "must be an object")
    return val


def _check_keys(obj: dict, allowed, path: str) -> None:
    extra = set(obj) - set(allowed)
    if extra:
        raise ConfigError(f"{path}.{sorted(extra)[0]}", "unknown key")


def _num(obj: dict, key: str, path: str, default, kind=float, lo=None, hi=None, lo_open=False):
    if key not in obj:
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", "must be a number")
    if kind is int and int(v) != v:
        raise ConfigError(f"{path}.{key}", "must be an integer")
    v = kind(v)
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(f"{path}.{key}", f"must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and v > hi:
        raise ConfigError(f"{path}.{key}", f"must be <= {hi}")
    return v


def _bool(obj: dict, key: str, path: str, default: bool) -> bool:
    if key not in obj:
        return default
    if not isinstance(obj[key], bool):
        raise ConfigError(f"{path}.{key}", "must be true or false")
    return obj[key]


def _choice(obj: dict, key: str, path: str, default: str, options) -> str:
    if key not in obj:
        return default
    v = obj[key]
    if v not in options:
        raise ConfigError(f"{path}.{key}", f"must be one of {list(options)}")
    return v


def _parse_slices(items, path: str) -> tuple[SliceSpec, ...]:
    if not isinstance(items, list):
        raise ConfigError(path, "must be a list")
    out = []
    for k, it in enumerate(items):
        p = f"{path}[{k}]"
        if not isinstance(it, dict):
            raise ConfigError(p, "must be an object")
        _check_keys(it, ("name", "rule", "column", "bin_count", "row_sets"), p)
        rule = _choice(it, "rule", p, "feature_quantile", SLICE_RULES)
        try:
            out.append(
                SliceSpec(
                    name=str(it.get("name", f"slice{k}")),
                    rule=rule,
                    column=it.get("column"),
                    bin_count=_num(it, "bin_count", p, 4, int, lo=1),
                    row_sets=tuple(tuple(int(i) for i in rs) for rs in it.get("row_sets", [])),
                )
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(p, str(exc)) from exc
    return tuple(out)


def parse_config(raw: Any) -> RunConfig:
    """Validate a decoded JSON document; errors name the offending field path."""
    if not isinstance(raw, dict):
        raise ConfigError("$", "config must be a JSON object")
    _check_keys(
        raw,
        ("seed", "data", "preprocess", "split", "pool", "normalizer", "mad", "conformal", "metrics", "output",
         "regret", "ablate", "corrupt"),
        "$",
    )
    seed = _num(raw, "seed", "$", 0, int, lo=0)

    d = _section(raw, "data")
    _check_keys(d, ("source", "name", "path", "label_column", "categorical", "protocol", "params"), "data")
    source = _choice(d, "source", "data", "synthetic", ("synthetic", "csv"))
    name = _choice(d, "name", "data", "two_gaussian", BUNDLED)
    path = d.get("path")
    if source == "csv" and not isinstance(path, str):
        raise ConfigError("data.path", "required for csv source")
    params = d.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("data.params", "must be an object")
    data = DataSection(
        source=source,
        name=name,
        path=path,
        label_column=d.get("label_column", "label"),
        categorical=tuple(d.get("categorical", ())),
        protocol=_choice(d, "protocol", "data", "semi_supervised", ("semi_supervised", "unsupervised", "supervised")),
        params=dict(params),
    )

    pre = _section(raw, "preprocess")
    _check_keys(pre, ("add_missing_indicators",), "preprocess")

    s = _section(raw, "split")
    _check_keys(s, ("fractions", "stratify", "export"), "split")
    fr = s.get("fractions", SplitSection().fractions)
    if not isinstance(fr, dict):
        raise ConfigError("split.fractions", "must be an object")
    for k, v in fr.items():
        if k not in SPLIT_TAGS:
            raise ConfigError(f"split.fractions.{k}", "unknown split name")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
            raise ConfigError(f"split.fractions.{k}", "must be a nonnegative number")
    if abs(sum(fr.values()) - 1.0) > 1e-9:
        raise ConfigError("split.fractions", f"must sum to 1, got {sum(fr.values()):.6g}")
    if fr.get("train", 0) <= 0 or fr.get("test", 0) <= 0:
        raise ConfigError("split.fractions", "train and test fractions must be positive")
    split = SplitSection({k: float(v) for k, v in fr.items()}, _bool(s, "stratify", "split", True),
                         _bool(s, "export", "split", True))

    p = _section(raw, "pool")
    _check_keys(p, [f.name for f in fields(PoolConfig)], "pool")
    dets = p.get("detectors", list(DETECTOR_NAMES))
    if not isinstance(dets, list) or not dets or any(x not in DETECTOR_NAMES for x in dets):
        raise ConfigError("pool.detectors", f"must be a nonempty list drawn from {list(DETECTOR_NAMES)}")
    pool = PoolConfig(
        detectors=tuple(dets),
        bootstrap_B=_num(p, "bootstrap_B", "pool", 16, int, lo=2),
        knn_k=_num(p, "knn_k", "pool", 10, int, lo=1),
        n_trees=_num(p, "n_trees", "pool", 100, int, lo=1),
        subsample=_num(p, "subsample", "pool", 256, int, lo=2),
        hbos_bins=_num(p, "hbos_bins", "pool", 20, int, lo=1),
        pca_variance=_num(p, "pca_variance", "pool", 0.9, float, lo=0, hi=1, lo_open=True),
    )

    nz = _section(raw, "normalizer")
    _check_keys(nz, ("kind",), "normalizer")

    m = _section(raw, "mad")
    _check_keys(
        m,
        ("eta", "lambda", "gamma", "rounds_T", "epsilon", "perturbation", "supervised", "final_weights",
         "initial_weights", "mode"),
        "mad",
    )
    pert = m.get("perturbation", {})
    if not isinstance(pert, dict):
        raise ConfigError("mad.perturbation", "must be an object")
    _check_keys(pert, ("noise_scale", "samples_K"), "mad.perturbation")
    eta = _num(m, "eta", "mad", 1.0, lo=0, lo_open=True)
    iw = m.get("initial_weights")
    if iw is not None and (not isinstance(iw, list) or len(iw) != len(dets)):
        raise ConfigError("mad.initial_weights", "must list one weight per detector")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mad = MadConfig(
                eta=eta,
                lam=_num(m, "lambda", "mad", 0.5, lo=0),
                gamma=_num(m, "gamma", "mad", 0.5, lo=0),
                rounds_T=_num(m, "rounds_T", "mad", 1, int, lo=1),
                epsilon=_num(m, "epsilon", "mad", 1e-6, lo=0, lo_open=True),
                perturbation=PerturbationSpec(
                    noise_scale=_num(pert, "noise_scale", "mad.perturbation", 0.05, lo=0),
                    samples_K=_num(pert, "samples_K", "mad.perturbation", 8, int, lo=1),
                ),
                supervised=_bool(m, "supervised", "mad", False),
                seed=seed,
                final_weights=_choice(m, "final_weights", "mad", "post", ("pre", "post")),
                initial_weights=None if iw is None else tuple(iw),
            )
    except MadError as exc:
        raise ConfigError("mad.initial_weights", str(exc)) from exc
    mode = _choice(m, "mode", "mad", "per_input_reset", STREAM_MODES)

    c = _section(raw, "conformal")
    _check_keys(c, ("enabled", "alpha"), "conformal")
    conformal = ConformalSection(_bool(c, "enabled", "conformal", True),
                                 _num(c, "alpha", "conformal", 0.05, lo=0, hi=1, lo_open=True))
    if conformal.enabled and mode != "per_input_reset":
        raise ConfigError("conformal.enabled", "conformal p-values require mad.mode = per_input_reset")
    if conformal.enabled and split.fractions.get("calibration", 0) <= 0:
        raise ConfigError("split.fractions.calibration", "must be positive when conformal is enabled")

    mt = _section(raw, "metrics")
    _check_keys(mt, ("fpr_budget", "ece_bins", "slices"), "metrics")
    metrics = MetricsSection(
        fpr_budget=_num(mt, "fpr_budget", "metrics", 0.01, lo=0, hi=1, lo_open=True),
        ece_bins=_num(mt, "ece_bins", "metrics", 15, int, lo=1),
        slices=_parse_slices(mt.get("slices", []), "metrics.slices"),
    )

    o = _section(raw, "output")
    _check_keys(o, ("dir", "traces"), "output")

    r = _section(raw, "regret")
    _check_keys(r, [f.name for f in fields(RegretSection)], "regret")
    regret = RegretSection(
        N=_num(r, "N", "regret", 5, int, lo=1),
        eta=_num(r, "eta", "regret", 0.5, lo=0, hi=1, lo_open=True),
        T=_num(r, "T", "regret", 1000, int, lo=1),
        generator=_choice(r, "generator", "regret", "uniform", LOSS_GENERATORS + ("all",)),
        seeds=_num(r, "seeds", "regret", 10, int, lo=1),
        lam=_num(r, "lam", "regret", 0.5, lo=0),
        gamma=_num(r, "gamma", "regret", 0.5, lo=0),
    )

    a = _section(raw, "ablate")
    _check_keys(a, ("grid",), "ablate")
    grid = a.get("grid", copy.deepcopy(DEFAULT_GRID))
    if not isinstance(grid, dict):
        raise ConfigError("ablate.grid", "must be an object")
    _check_keys(grid, DEFAULT_GRID.keys(), "ablate.grid")
    for k in DEFAULT_GRID:
        vals = grid.setdefault(k, [getattr(mad, "lam" if k == "lambda" else k)])
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"ablate.grid.{k}", "must be a nonempty list")

    cr = _section(raw, "corrupt")
    _check_keys(cr, ("kinds", "severities"), "corrupt")
    kinds = cr.get("kinds", list(CORRUPTION_KINDS))
    if not isinstance(kinds, list) or any(k not in CORRUPTION_KINDS for k in kinds):
        raise ConfigError("corrupt.kinds", f"must be a list drawn from {list(CORRUPTION_KINDS)}")
    sev = cr.get("severities", [0.0, 0.25, 0.5])
    if not isinstance(sev, list) or any(isinstance(x, bool) or not isinstance(x, (int, float)) or not 0 <= x <= 1
                                        for x in sev):
        raise ConfigError("corrupt.severities", "must be a list of numbers in [0, 1]")

    return RunConfig(
        seed=seed,
        data=data,
        add_missing_indicators=_bool(pre, "add_missing_indicators", "preprocess", True),
        split=split,
        pool=pool,
        normalizer=_choice(nz, "kind", "normalizer", "rank_percentile", NORMALIZER_KINDS),
        mad=mad,
        mode=mode,
        conformal=conformal,
        metrics=metrics,
        output_dir=str(o.get("dir", "out")),
        write_traces=_bool(o, "traces", "output", True),
        regret=regret,
        grid=grid,
        sweep={"kinds": kinds, "severities": [float(x) for x in sev]},
    )


def bundled_config_text(name: str) -> str:
    return resources.files("mad_debate").joinpath("configs", f"{name}.json").read_text(encoding="utf-8")


def load_config(path: str | Path) -> RunConfig:
    """Read a config file; ``bundled:<name>`` selects a shipped config."""
    spec = str(path)
    try:
        if spec.startswith("bundled:"):
            text = bundled_config_text(spec.split(":", 1)[1])
        else:
            text = Path(spec).read_text(encoding="utf-8")
    except (OSError, FileNotFoundError) as exc:
        raise ConfigError("$", f"cannot read config {spec!r}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from exc
    return parse_config(raw)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed, mad=replace(cfg.mad, seed=seed))
