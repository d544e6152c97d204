import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from spry.encoding import EncodingSchedule, alpha_at, band_weights, encode, encode_batch, frequency_weight


def literal_weight(k, alpha):
    """Direct transcription of the piecewise window, used as the oracle."""
    if alpha < k:
        return 0.0
    if 0 <= alpha - k < 1:
        return (1 - math.cos((alpha - k) * math.pi)) / 2
    return 1.0


def test_alpha_schedule():
    s = EncodingSchedule(bands=10, ramp_iters=1000)
    assert alpha_at(s, 0) == 0
    assert alpha_at(s, 500) == 5
    assert alpha_at(s, 1000) == 10
    assert alpha_at(s, 10**6) == 10
    with pytest.raises(ValueError):
        alpha_at(s, -1)


def test_alpha_monotone():
    s = EncodingSchedule(bands=7, ramp_iters=333)
    a = [alpha_at(s, i) for i in range(800)]
    assert all(x <= y for x, y in zip(a, a[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        EncodingSchedule(bands=0)
    with pytest.raises(ValueError):
        EncodingSchedule(ramp_iters=0)


@pytest.mark.parametrize("k, alpha, expected", [(3, 2.0, 0.0), (2, 2.5, 0.5), (1, 3.0, 1.0)])
def test_weight_examples(k, alpha, expected):
    assert frequency_weight(k, alpha) == expected


@given(k=st.integers(0, 15), alpha=st.floats(0.0, 16.0))
def test_weight_matches_literal_formula(k, alpha):
    w = frequency_weight(k, alpha)
    assert 0.0 <= w <= 1.0
    assert w == pytest.approx(literal_weight(k, alpha), abs=1e-15)


def test_weight_monotone_and_continuous_on_grid():
    grid = np.arange(0.0, 10.0 + 1e-9, 1e-3)
    for k in range(10):
        w = np.array([frequency_weight(k, a) for a in grid])
        assert np.diff(w).min() >= -1e-9
        # largest jump of the raised cosine over one grid step is pi/2 * 1e-3
        assert np.abs(np.diff(w)).max() <= math.pi / 2 * 1e-3 + 1e-12


def test_active_band_set_grows():
    prev = set()
    for alpha in np.linspace(0, 10, 1001):
        active = {k for k in range(10) if frequency_weight(k, alpha) == 1.0}
        assert prev <= active
        prev = active
    assert prev == set(range(10))


def test_encode_at_origin_fully_open():
    s = EncodingSchedule(bands=4)
    out = encode(np.zeros(3), s, 4.0)
    np.testing.assert_array_equal(out[:3], 0.0)
    pairs = out[3:].reshape(4, 3, 2)
    np.testing.assert_array_equal(pairs[..., 0], 1.0)
    np.testing.assert_array_equal(pairs[..., 1], 0.0)


def test_encode_closed_window_zeroes_bands():
    s = EncodingSchedule(bands=6)
    x = np.array([0.3, -0.7, 0.11])
    out = encode(x, s, 0.0)
    np.testing.assert_array_equal(out[:3], x)
    np.testing.assert_array_equal(out[3:], 0.0)


def test_encode_quarter_value():
    s = EncodingSchedule(bands=3, include_identity=False)
    out = encode([0.25, 0.0, 0.0], s, 1.0)
    np.testing.assert_allclose(out[:2], [math.cos(math.pi / 4), math.sin(math.pi / 4)], atol=1e-15)
    np.testing.assert_allclose(out[:2], [0.70711, 0.70711], atol=1e-5)


@pytest.mark.parametrize("bands", [1, 4, 10])
@pytest.mark.parametrize("identity", [True, False])
def test_encode_length(bands, identity):
    s = EncodingSchedule(bands=bands, include_identity=identity)
    assert len(encode(np.ones(3), s, 0.5)) == 3 * 2 * bands + 3 * identity == s.dim


def test_batch_matches_single():
    rng = np.random.default_rng(0)
    s = EncodingSchedule(bands=5)
    x = rng.uniform(-1, 1, size=(7, 3))
    batch = encode_batch(torch.from_numpy(x), 5, 2.3).numpy()
    for row, out in zip(x, batch):
        np.testing.assert_allclose(out, encode(row, s, 2.3), atol=1e-15)


def test_band_weights_open_window():
    np.testing.assert_array_equal(band_weights(4, None), 1.0)
    np.testing.assert_array_equal(band_weights(4, 4.0), 1.0)
