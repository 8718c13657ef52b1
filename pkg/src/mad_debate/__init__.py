"""Debate-weighted anomaly detection.

A pool of heterogeneous detectors sends (score, confidence, evidence)
messages; a coordinator turns them into bounded per-agent losses and
reweights the agents with exponentiated gradient before emitting a score.
"""

from __future__ import annotations

from .agents import AgentPool, PoolConfig, fit_pool
from .config import RunConfig, load_config, parse_config
from .coordinator import aggregate_score, debate, debate_batch, eg_update, run_stream
from .core import DebateTrace, MadConfig, WeightVector
from .pipeline import fit_pipeline, run

__all__ = [
    "AgentPool",
    "DebateTrace",
    "MadConfig",
    "PoolConfig",
    "RunConfig",
    "WeightVector",
    "aggregate_score",
    "debate",
    "debate_batch",
    "eg_update",
    "fit_pipeline",
    "fit_pool",
    "load_config",
    "parse_config",
    "run",
    "run_stream",
]

__version__ = "0.1.0"
