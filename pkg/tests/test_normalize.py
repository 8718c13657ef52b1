from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mad_debate.normalize import NORMALIZER_KINDS, EmptyScores, fit_normalizer, normalize

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_rank_examples():
    nu = fit_normalizer("rank_percentile", [9, 1, 5])
    assert nu.sorted_scores.tolist() == [1, 5, 9]
    assert normalize(nu, 5) == 0.5
    assert normalize(nu, 100) == 0.75
    assert normalize(nu, -100) == 0.0


def test_min_max_examples():
    flat = fit_normalizer("min_max", [4, 4, 4])
    assert flat.degenerate and normalize(flat, 123.0) == 0.5
    nu = fit_normalizer("min_max", [0, 10])
    assert normalize(nu, -5) == 0.0
    assert normalize(nu, 15) == 1.0
    assert normalize(nu, 2.5) == 0.25


def test_z_sigmoid_population_std():
    nu = fit_normalizer("z_sigmoid", [0, 2])
    assert (nu.mean, nu.std) == (1.0, 1.0)
    assert normalize(nu, 1.0) == 0.5


def test_errors():
    with pytest.raises(EmptyScores):
        fit_normalizer("rank_percentile", [])
    with pytest.raises(ValueError):
        fit_normalizer("isotonic", [1.0])


def test_vectorized_matches_scalar():
    nu = fit_normalizer("rank_percentile", np.arange(10.0))
    q = np.array([-1.0, 0.0, 4.5, 9.0, 20.0])
    assert np.array_equal(normalize(nu, q), np.array([normalize(nu, x) for x in q]))


@settings(max_examples=150, deadline=None)
@given(
    kind=st.sampled_from(NORMALIZER_KINDS),
    train=st.lists(finite, min_size=1, max_size=40),
    a=finite,
    b=finite,
)
def test_monotone_and_bounded(kind, train, a, b):
    nu = fit_normalizer(kind, train)
    lo, hi = sorted((a, b))
    u, v = normalize(nu, lo), normalize(nu, hi)
    assert 0.0 <= u <= v <= 1.0
    if kind == "rank_percentile":
        assert u < 1.0


@settings(max_examples=100, deadline=None)
@given(train=st.lists(st.integers(-400, 400), min_size=1, max_size=40), q=st.integers(-480, 480),
       scale=st.integers(1, 40), offset=st.integers(-100, 100))
def test_rank_invariant_to_monotone_transforms(train, q, scale, offset):
    # values on a 1/8 grid keep exp and the affine map strictly order-preserving in floating point
    t = np.asarray(train) / 8.0
    qv = q / 8.0
    base = normalize(fit_normalizer("rank_percentile", t), qv)
    assert normalize(fit_normalizer("rank_percentile", np.exp(t / 10)), np.exp(qv / 10)) == base
    s, o = scale / 4.0, float(offset)
    assert normalize(fit_normalizer("rank_percentile", t * s + o), qv * s + o) == base
