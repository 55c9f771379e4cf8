"""Recency model: window smoothing, loss values, video-side-only input."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from intervalrec.dataio import EncodedDataset
from intervalrec.numerics import ComputeTape, grad_check
from intervalrec.perceptron import (
    RecencyConfig,
    RecencyPerceptron,
    load_recency_cache,
    recency_loss,
    save_recency_cache,
    smoothing_matrix,
    window_smooth,
)
from tests.worlds import tiny_schema_and_batch

LN2 = math.log(2.0)


# -- window smoothing ------------------------------------------------------


def test_window_smooth_interior_and_truncated_edges():
    scores = [0.2, 0.4, 0.6]
    assert window_smooth(scores, 1, 1) == pytest.approx(0.4, abs=1e-12)
    # Edge windows truncate: [a-1, a+1] clipped to valid buckets, mean over
    # the buckets actually present (2 of them), not over the nominal 3.
    assert window_smooth(scores, 0, 1) == pytest.approx(0.3, abs=1e-12)
    assert window_smooth(scores, 2, 1) == pytest.approx(0.5, abs=1e-12)


def test_window_smooth_zero_window_is_identity():
    scores = [0.2, 0.4, 0.6]
    for a in range(3):
        assert window_smooth(scores, a, 0) == scores[a]


def test_window_smooth_rejects_interval_outside_horizon():
    with pytest.raises(ValueError, match="outside"):
        window_smooth([0.1, 0.2], 2, 1)


def test_smoothing_matrix_rows():
    s = smoothing_matrix(5, 1)
    np.testing.assert_allclose(s[0], [0.5, 0.5, 0, 0, 0])
    np.testing.assert_allclose(s[2], [0, 1 / 3, 1 / 3, 1 / 3, 0])
    np.testing.assert_allclose(s[4], [0, 0, 0, 0.5, 0.5])
    np.testing.assert_allclose(s.sum(axis=1), np.ones(5))


def test_smoothing_matrix_zero_window_is_identity():
    np.testing.assert_array_equal(smoothing_matrix(4, 0), np.eye(4))


def test_smoothing_matrix_validation():
    with pytest.raises(ValueError, match=">= 0"):
        smoothing_matrix(3, -1)
    with pytest.raises(ValueError, match="too wide"):
        smoothing_matrix(3, 2)


@given(
    horizon=st.integers(min_value=1, max_value=12),
    window=st.integers(min_value=0, max_value=5),
    seed=st.integers(min_value=0, max_value=999),
)
def test_matrix_and_scalar_smoothing_agree(horizon, window, seed):
    if 2 * window + 1 > horizon:
        window = (horizon - 1) // 2
    scores = np.random.default_rng(seed).normal(size=horizon)
    via_matrix = smoothing_matrix(horizon, window) @ scores
    via_scalar = [window_smooth(scores, a, window) for a in range(horizon)]
    np.testing.assert_allclose(via_matrix, via_scalar, atol=1e-12)


# -- model forward ---------------------------------------------------------


def make_model(seed=0, **kwargs):
    schema, batch = tiny_schema_and_batch()
    model = RecencyPerceptron(schema, RecencyConfig(**kwargs), np.random.default_rng(seed))
    return schema, batch, model


def test_zero_parameters_give_zero_scores():
    _, batch, model = make_model()
    for p in model.parameters():
        p.value[:] = 0.0
    out = model.forward_scores(ComputeTape(training=False), batch).value
    assert out.shape == (len(batch), 30)
    np.testing.assert_array_equal(out, np.zeros_like(out))


def test_scores_ignore_user_side_fields():
    _, batch, model = make_model()
    scrambled = EncodedDataset(
        user_idx=batch.user_idx[::-1].copy(),
        video_idx=batch.video_idx,
        user_dense=batch.user_dense + 17.0,
        video_dense=batch.video_dense,
        interval=batch.interval,
        label=batch.label,
        user_ids=batch.user_ids,
        video_ids=batch.video_ids,
        schema_hash=batch.schema_hash,
    )
    a = model.forward_scores(ComputeTape(training=False), batch).value
    b = model.forward_scores(ComputeTape(training=False), scrambled).value
    np.testing.assert_array_equal(a, b)


def test_unseen_video_id_maps_to_reserved_row_and_finite_scores():
    _, batch, model = make_model()
    oov = EncodedDataset(
        user_idx=batch.user_idx,
        video_idx=np.zeros_like(batch.video_idx),
        user_dense=batch.user_dense,
        video_dense=batch.video_dense,
        interval=batch.interval,
        label=batch.label,
        user_ids=batch.user_ids,
        video_ids=batch.video_ids,
        schema_hash=batch.schema_hash,
    )
    out = model.forward_scores(ComputeTape(training=False), oov).value
    assert np.isfinite(out).all()


def test_schema_hash_mismatch_refused():
    _, _, model = make_model()
    other_schema, other_batch = tiny_schema_and_batch(extra_tag=True)
    with pytest.raises(ValueError, match="schema hash"):
        model.forward_scores(ComputeTape(training=False), other_batch)


def test_id_embedding_carries_the_decay_coefficient():
    _, _, model = make_model(id_decay=2.5)
    assert model.embeddings[0].decay == 2.5
    assert all(p.decay == 0.0 for p in model.parameters()[1:])


def test_config_validation():
    with pytest.raises(ValueError, match="id_decay"):
        RecencyConfig(id_decay=-1.0).validate()
    with pytest.raises(ValueError, match="dropout"):
        RecencyConfig(dropout=1.0).validate()


# -- loss ------------------------------------------------------------------


def test_loss_at_zero_scores_is_ln2():
    _, batch, model = make_model()
    for p in model.parameters():
        p.value[:] = 0.0
    tape = ComputeTape(training=False)
    raw = model.forward_scores(tape, batch)
    labels = np.ones(len(batch))
    loss = recency_loss(tape, raw, batch.interval, labels, smoothing_matrix(30, 1))
    assert float(loss.value) == pytest.approx(LN2, abs=1e-12)


def test_loss_at_constant_scores_matches_closed_form():
    _, batch, model = make_model()
    for p in model.parameters():
        p.value[:] = 0.0
    model.head_b.value[:] = 2.0  # raw score 2 in every bucket, smoothing is a no-op
    tape = ComputeTape(training=False)
    raw = model.forward_scores(tape, batch)
    np.testing.assert_allclose(raw.value, 2.0, atol=1e-12)
    pos = recency_loss(tape, raw, batch.interval, np.ones(len(batch)), smoothing_matrix(30, 1))
    assert float(pos.value) == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)  # 0.126928...
    neg = recency_loss(tape, raw, batch.interval, np.zeros(len(batch)), smoothing_matrix(30, 1))
    assert float(neg.value) == pytest.approx(math.log(1 + math.exp(2)), abs=1e-12)


def test_loss_uses_the_observed_interval_after_smoothing():
    # Hand-set a raw-score matrix so every row is [0.2, 0.4, 0.6, 0, ...]:
    # with window 1 the smoothed value at interval 1 is 0.4 and at 0 is 0.3.
    _, batch, model = make_model()
    tape = ComputeTape(training=False)
    raw = tape.constant(np.tile(np.array([0.2, 0.4, 0.6] + [0.0] * 27), (len(batch), 1)))
    smoothing = smoothing_matrix(30, 1)
    labels = np.ones(len(batch))

    at1 = recency_loss(tape, raw, np.ones(len(batch), dtype=np.int64), labels, smoothing)
    expect1 = -math.log(1 / (1 + math.exp(-0.4)))
    assert float(at1.value) == pytest.approx(expect1, abs=1e-12)

    at0 = recency_loss(tape, raw, np.zeros(len(batch), dtype=np.int64), labels, smoothing)
    expect0 = -math.log(1 / (1 + math.exp(-0.3)))
    assert float(at0.value) == pytest.approx(expect0, abs=1e-12)


def test_recency_gradients_against_finite_differences():
    # Init seed pinned clear of ReLU kinks, as in the backbone check.
    _, batch, model = make_model(seed=0)
    labels = np.array([1.0, 0.0, 1.0, 0.0])
    smoothing = smoothing_matrix(30, 1)

    def build(tape):
        raw = model.forward_scores(tape, batch)
        return recency_loss(tape, raw, batch.interval, labels, smoothing)

    res = grad_check(build, model.parameters(), max_entries=4000)
    assert res.ok(1e-4), f"worst {res.worst_param}: {res.max_rel_error}"


# -- cache -----------------------------------------------------------------


def test_cache_round_trip_and_schema_guard(tmp_path):
    path = tmp_path / "cache.json"
    vectors = {"v1": np.arange(30, dtype=np.float64), "v2": np.full(30, -0.25)}
    save_recency_cache(path, "hash-a", vectors)
    loaded = load_recency_cache(path, "hash-a")
    assert set(loaded) == {"v1", "v2"}
    np.testing.assert_array_equal(loaded["v1"], vectors["v1"])
    np.testing.assert_array_equal(loaded["v2"], vectors["v2"])
    with pytest.raises(ValueError, match="different schema"):
        load_recency_cache(path, "hash-b")
