import math

import numpy as np
import pytest

from foleygen import data, dsp, metrics
from foleygen.config import DESK_MODEL
from foleygen.errors import ShapeError, UndefinedSimilarityError


def test_mcd_identical_is_zero(rng):
    m = rng.normal(size=(20, 80))
    assert metrics.mcd(m, m) == 0.0


def test_mcd_single_perturbation_closed_form(rng):
    m = rng.normal(size=(50, 80))
    delta = -0.7
    m_hat = m.copy()
    m_hat[13, 40] += delta
    expected = (10 / math.log(10)) * math.sqrt(2) * abs(delta) / 50
    assert metrics.mcd(m, m_hat) == pytest.approx(expected, rel=1e-12)


def test_mcd_metric_properties(rng):
    for _ in range(20):
        a, b, c = (rng.normal(size=(10, 8)) for _ in range(3))
        assert metrics.mcd(a, b) == pytest.approx(metrics.mcd(b, a))
        assert metrics.mcd(a, c) <= metrics.mcd(a, b) + metrics.mcd(b, c) + 1e-12
        assert metrics.mcd(a, b) > 0
    with pytest.raises(ShapeError):
        metrics.mcd(np.zeros((3, 2)), np.zeros((3, 3)))


def test_cosine_cases(rng):
    x = rng.normal(size=16)
    assert metrics.cosine_similarity(x, x) == pytest.approx(1.0)
    assert metrics.cosine_similarity(x, -x) == pytest.approx(-1.0)
    assert metrics.cosine_similarity(np.eye(4)[0], np.eye(4)[2]) == 0.0
    y = rng.normal(size=16)
    assert metrics.cosine_similarity(3.5 * x, y) == pytest.approx(metrics.cosine_similarity(x, y))
    with pytest.raises(UndefinedSimilarityError):
        metrics.cosine_similarity(np.zeros(3), np.ones(3))


def test_timbre_embedding_unit_norm_and_shift_invariant():
    s = data.synthesize_sample(DESK_MODEL, seed=5, event_times=[6, 30])
    e = metrics.timbre_embedding(s.pair.mel)
    assert e.shape == (64,) and np.linalg.norm(e) == pytest.approx(1.0)
    assert metrics.timbre_similarity(s.pair.mel, s.pair.mel) == pytest.approx(1.0)
    shifted = dsp.time_shift(s.pair.mel, shift=37)
    assert metrics.timbre_similarity(s.pair.mel, shifted) == pytest.approx(1.0)


def test_onsets_on_clean_synthesis():
    for s in data.synthesize_corpus(DESK_MODEL, 16, seed=11):
        hit, offset = metrics.onset_alignment(s.pair.mel, s.event_times, tol_frames=2)
        assert hit == 1.0 and offset <= 2


def test_onsets_zero_events_vacuous():
    s = data.synthesize_sample(DESK_MODEL, seed=3, event_times=[])
    assert metrics.onset_alignment(s.pair.mel, [], tol_frames=3)[0] == 1.0


def test_onsets_shifted_by_twenty_frames():
    s = data.synthesize_sample(DESK_MODEL, seed=8, event_times=[8, 30], noise_floor=0.004)
    shifted = dsp.time_shift(s.pair.mel, shift=20)
    hit, offset = metrics.onset_alignment(shifted, s.event_times, tol_frames=25)
    assert hit == 1.0
    assert offset == pytest.approx(20, abs=1.5)


def test_match_onsets_one_to_one():
    assert metrics.match_onsets([10, 11], [10], tol=3) == [(10, 10)]
    assert metrics.match_onsets([], [4], tol=3) == []
    assert metrics.match_onsets([20], [4], tol=3) == []
