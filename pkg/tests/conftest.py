from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from mad_debate.agents import PoolConfig, fit_pool
from mad_debate.datasets import two_gaussian
from mad_debate.normalize import fit_normalizers

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_table():
    return two_gaussian(n=600, d=4, anomaly_rate=0.05, seed=3, latent=2)


@pytest.fixture(scope="session")
def small_pool(small_table):
    X = small_table.values[small_table.labels == 0]
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    cfg = PoolConfig(bootstrap_B=4, n_trees=20, subsample=64)
    pool = fit_pool(X, config=cfg, seed=11)
    return pool, fit_normalizers("rank_percentile", pool.train_scores), X


def small_config(tmp_path: Path, **overrides) -> Path:
    """Write a fast run config (small data, few replicates) and return its path."""
    cfg = {
        "seed": 0,
        "data": {"source": "synthetic", "name": "two_gaussian", "params": {"n": 1500, "d": 6}},
        "split": {"fractions": {"train": 0.6, "validation": 0.1, "calibration": 0.1, "test": 0.2}},
        "pool": {"bootstrap_B": 4, "n_trees": 20, "subsample": 128},
        "mad": {"eta": 1.0, "lambda": 0.5, "gamma": 0.5, "rounds_T": 1},
        "output": {"dir": str(tmp_path / "out")},
    }
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **val}
        else:
            cfg[key] = val
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
