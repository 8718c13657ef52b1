"""Bundled desk-scale synthetic datasets, generated from a seed."""

from __future__ import annotations

import numpy as np

from .core import ColumnSpec, DatasetTable, stream

BUNDLED = ("two_gaussian", "ring_core")


def _table(X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> DatasetTable:
    perm = rng.permutation(X.shape[0])
    cols = tuple(ColumnSpec(f"x{j}", "numeric") for j in range(X.shape[1]))
    return DatasetTable(cols, X[perm], np.zeros(X.shape, dtype=bool), y[perm].astype(np.int8))


def two_gaussian(
    n: int = 5000,
    d: int = 10,
    anomaly_rate: float = 0.02,
    seed: int = 0,
    latent: int = 3,
    noise: float = 0.5,
    shift: float = 4.5,
) -> DatasetTable:
    """Two Gaussians sharing a low-rank covariance, differing in mean.

    Normals follow a ``latent``-factor model plus isotropic noise. Anomalies
    use the same covariance with the mean moved ``shift`` per-feature standard
    deviations along a random unit direction, which both breaks the factor
    structure and shifts the marginals.
    """
    rng = stream(seed, "data", "two_gaussian")
    n_anom = int(round(anomaly_rate * n))
    loadings = rng.standard_normal((latent, d))
    normals = rng.standard_normal((n - n_anom, latent)) @ loadings + noise * rng.standard_normal((n - n_anom, d))
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    offset = shift * u * normals.std(axis=0)
    anomalies = rng.standard_normal((n_anom, latent)) @ loadings + noise * rng.standard_normal((n_anom, d)) + offset
    X = np.vstack([normals, anomalies])
    y = np.r_[np.zeros(n - n_anom), np.ones(n_anom)]
    return _table(X, y, rng)


def ring_core(n: int = 2000, d: int = 5, anomaly_rate: float = 0.05, seed: int = 0) -> DatasetTable:
    """Normals on a noisy ring in the first two features; anomalies in its core."""
    rng = stream(seed, "data", "ring_core")
    n_anom = int(round(anomaly_rate * n))
    n_norm = n - n_anom
    theta = rng.uniform(0.0, 2.0 * np.pi, n_norm)
    radius = rng.normal(3.0, 0.3, n_norm)
    normals = rng.standard_normal((n_norm, d))
    normals[:, 0] = radius * np.cos(theta)
    normals[:, 1] = radius * np.sin(theta)
    anomalies = rng.standard_normal((n_anom, d))
    anomalies[:, :2] *= 0.6
    X = np.vstack([normals, anomalies])
    y = np.r_[np.zeros(n_norm), np.ones(n_anom)]
    return _table(X, y, rng)


def load_bundled(name: str, seed: int = 0, **kwargs) -> DatasetTable:
    if name == "two_gaussian":
        return two_gaussian(seed=seed, **kwargs)
    if name == "ring_core":
        return ring_core(seed=seed, **kwargs)
    raise ValueError(f"unknown bundled dataset {name!r}; choose from {BUNDLED}")
