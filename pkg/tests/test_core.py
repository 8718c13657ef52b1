from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mad_debate.coordinator import eg_update
from mad_debate.core import (
    DatasetTable,
    ColumnSpec,
    DebateTrace,
    Evidence,
    MadConfig,
    MalformedTrace,
    Message,
    NegativeWeight,
    NotNormalizable,
    RoundRecord,
    SynthesizedLoss,
    WeightVector,
    parse_trace,
    read_traces,
    serialize_trace,
    stream,
    validate_weight_vector,
    write_traces,
)


def test_weight_vector_examples():
    w = validate_weight_vector([0.33, 0.33, 0.34])
    assert w.weights.tolist() == [0.33, 0.33, 0.34]
    assert validate_weight_vector([1.0]).weights.tolist() == [1.0]
    r = validate_weight_vector([0.5, 0.5000001])
    assert abs(r.weights.sum() - 1.0) <= 1e-12
    assert r.weights[0] == pytest.approx(0.5 / 1.0000001)


def test_weight_vector_rejects():
    with pytest.raises(NegativeWeight):
        validate_weight_vector([1.1, -0.1])
    with pytest.raises(NotNormalizable):
        validate_weight_vector([0.5, 0.4])
    with pytest.raises(NotNormalizable):
        validate_weight_vector([])


def test_synthesized_loss_bounds():
    with pytest.raises(ValueError):
        SynthesizedLoss(np.array([0.2, 1.2]))
    SynthesizedLoss(np.array([0.0, 1.0]))


def test_table_invariants():
    cols = (ColumnSpec("a", "numeric"),)
    with pytest.raises(ValueError):
        DatasetTable(cols, np.zeros((2, 1)), np.zeros((2, 1), bool), labels=np.array([0, 2]))
    with pytest.raises(ValueError):
        DatasetTable(cols, np.zeros((2, 2)), np.zeros((2, 2), bool))
    t = DatasetTable(cols, np.array([[1.0], [2.0]]), np.array([[False], [True]]))
    assert t.values[1, 0] == 0.0  # missing cells carry no value


def test_stream_is_labelled_and_reproducible():
    a = stream(7, "fit", "knn", 3).random(4)
    b = stream(7, "fit", "knn", 3).random(4)
    c = stream(7, "fit", "knn", 4).random(4)
    d = stream(8, "fit", "knn", 3).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_config_warns_above_one_and_digest_is_stable():
    with pytest.warns(UserWarning):
        MadConfig(eta=1.5)
    assert MadConfig().digest() == MadConfig().digest()
    assert MadConfig(lam=0.25).digest() != MadConfig().digest()


def _case_trace() -> DebateTrace:
    scores, conf = (0.91, 0.64, 0.22), (0.88, 0.55, 0.30)
    msgs = tuple(
        Message(i, s, c, Evidence(np.array([(-1.0) ** (i == 0), 0.5 * i]), rationale=f"agent {i}"))
        for i, (s, c) in enumerate(zip(scores, conf))
    )
    before = WeightVector(np.array([0.33, 0.33, 0.34]))
    ell = np.array([0.42, 0.18, 0.26])
    loss = SynthesizedLoss(ell, pred=ell, dispute=np.zeros(3), evidence=np.zeros(3))
    after = eg_update(before, loss, 1.0)
    agg = float(before.weights @ np.array(scores))
    rec = RoundRecord(msgs, loss, before, after, agg)
    return DebateTrace("row-1", (rec,), float(after.weights @ np.array(scores)), MadConfig().digest())


def test_trace_needs_components():
    t = _case_trace()
    rec = t.rounds[0]
    bare = RoundRecord(rec.messages, SynthesizedLoss(rec.losses.losses), rec.weights_before, rec.weights_after,
                       rec.aggregate_score)
    with pytest.raises(ValueError):
        serialize_trace(DebateTrace("x", (bare,), t.final_score, "d"))


def test_trace_needs_a_round():
    with pytest.raises(ValueError):
        DebateTrace("x", (), 0.5, "d")


def test_case_trace_round_trips():
    t = _case_trace()
    blob = serialize_trace(t)
    back = parse_trace(blob)
    assert back == t
    assert serialize_trace(back) == blob


def test_trace_file_round_trip(tmp_path):
    traces = [_case_trace(), _case_trace()]
    path = tmp_path / "t.ndjson"
    write_traces(path, traces)
    assert read_traces(path) == traces


@pytest.mark.parametrize("bad", [b"", b"{", b"[]", b'{"input_id": "x"}', b"\xff\xfe"])
def test_malformed_trace(bad):
    with pytest.raises(MalformedTrace):
        parse_trace(bad)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n_agents=st.integers(1, 6),
    d=st.integers(1, 5),
    rounds=st.integers(1, 4),
    with_cf=st.booleans(),
)
def test_random_trace_round_trips_bit_exactly(seed, n_agents, d, rounds, with_cf):
    rng = np.random.default_rng(seed)
    scores = rng.random(n_agents)
    msgs = tuple(
        Message(
            i,
            float(scores[i]),
            float(rng.random()),
            Evidence(rng.standard_normal(d) * 10.0 ** rng.integers(-8, 8), rng.standard_normal(d) if with_cf else None),
        )
        for i in range(n_agents)
    )
    w = WeightVector.uniform(n_agents)
    recs = []
    for _ in range(rounds):
        loss = SynthesizedLoss(rng.random(n_agents), rng.random(n_agents), rng.random(n_agents), rng.random(n_agents))
        nxt = eg_update(w, loss, float(rng.uniform(0.01, 1.0)))
        recs.append(RoundRecord(msgs, loss, w, nxt, float(w.weights @ scores)))
        w = nxt
    t = DebateTrace(f"r{seed}", tuple(recs), float(np.clip(w.weights @ scores, 0, 1)), "digest")
    blob = serialize_trace(t)
    back = parse_trace(blob)
    assert back == t
    assert serialize_trace(back) == blob
