import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from roofplanes.kan import (
    FourierKanLayer,
    apply_stack,
    gradient_check,
    gradient_error,
    identity_layer,
    mask_scores,
)


def naive_forward(layer, x):
    """Reference: explicit triple loop over outputs, inputs and frequencies."""
    out = []
    for o in range(layer.out_dim):
        acc = layer.bias[o]
        for i in range(layer.in_dim):
            for k in range(1, layer.grid_size + 1):
                acc += layer.a[o, i, k - 1] * math.cos(k * x[i]) + layer.b[o, i, k - 1] * math.sin(k * x[i])
        out.append(acc)
    return np.array(out)


def test_zero_coefficients_give_bias(rng):
    layer = FourierKanLayer.zeros(3, 2, 5)
    layer.bias[:] = [1.5, -2.0]
    np.testing.assert_array_equal(layer.forward(rng.normal(size=3)), [1.5, -2.0])


def test_single_sine():
    layer = FourierKanLayer(np.zeros((1, 1, 1)), np.ones((1, 1, 1)), np.zeros(1))
    assert layer.forward(np.array([np.pi / 2]))[0] == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_naive_loops(seed):
    rng = np.random.default_rng(seed)
    layer = FourierKanLayer.random(4, 3, 5, rng)
    x = rng.uniform(-5, 5, 4)
    np.testing.assert_allclose(layer.forward(x), naive_forward(layer, x), atol=1e-12, rtol=0)
    batch = rng.uniform(-5, 5, (6, 4))
    np.testing.assert_allclose(layer.forward(batch), [naive_forward(layer, b) for b in batch], atol=1e-12)


def test_dimension_mismatch():
    layer = FourierKanLayer.random(4, 3, seed=0)
    with pytest.raises(ValueError):
        layer.forward(np.zeros(5))
    with pytest.raises(ValueError):
        layer.backward(np.zeros(4), np.zeros(2))
    with pytest.raises(ValueError):
        FourierKanLayer(np.zeros((1, 2, 3)), np.zeros((1, 2, 4)), np.zeros(1))


def test_initialization_range():
    layer = FourierKanLayer.random(4, 3, 5, seed=0)
    bound = 1 / (4 * math.sqrt(5))
    assert layer.a.shape == (3, 4, 5) and np.abs(layer.a).max() <= bound
    assert np.abs(layer.b).max() <= bound


def test_zero_upstream_zero_gradients(rng):
    layer = FourierKanLayer.random(3, 2, seed=1)
    g = layer.backward(rng.normal(size=3), np.zeros(2))
    for arr in (g.a, g.b, g.bias, g.x):
        assert not np.any(arr)


def test_constant_layer_has_zero_input_gradient(rng):
    layer = FourierKanLayer.zeros(3, 2, 4)
    layer.bias[:] = 7.0
    np.testing.assert_array_equal(layer.backward(rng.normal(size=3), rng.normal(size=2)).x, 0.0)


def test_analytic_partials_closed_form():
    layer = FourierKanLayer.random(2, 1, 3, seed=4)
    x = np.array([0.3, -1.1])
    g = layer.backward(x, np.array([1.0]))
    k = np.arange(1, 4)
    np.testing.assert_allclose(g.a[0], np.cos(np.outer(x, k)), atol=1e-15)
    np.testing.assert_allclose(g.b[0], np.sin(np.outer(x, k)), atol=1e-15)
    expected_x = [np.sum(k * (-layer.a[0, i] * np.sin(k * x[i]) + layer.b[0, i] * np.cos(k * x[i])))
                  for i in range(2)]
    np.testing.assert_allclose(g.x, expected_x, atol=1e-14)


def test_batch_backward_sums_single_gradients(rng):
    layer = FourierKanLayer.random(3, 2, seed=5)
    xs, ups = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    g = layer.backward(xs, ups)
    singles = [layer.backward(x, u) for x, u in zip(xs, ups)]
    np.testing.assert_allclose(g.a, sum(s.a for s in singles), atol=1e-13)
    np.testing.assert_allclose(g.x, np.array([s.x for s in singles]), atol=1e-13)


def test_gradients_match_finite_differences():
    errors = gradient_check(seed=0, draws=100)
    assert len(errors) == 100 and max(errors) < 1e-5


def test_gradient_error_detects_wrong_gradient(monkeypatch):
    layer = FourierKanLayer.random(2, 2, seed=0)
    original = FourierKanLayer.backward

    def broken(self, x, up):
        g = original(self, x, up)
        g.a = g.a * 1.01
        return g

    monkeypatch.setattr(FourierKanLayer, "backward", broken)
    assert gradient_error(layer, np.array([0.4, 0.9]), np.array([1.0, -0.5])) > 1e-3


@given(st.integers(0, 2**32 - 1), st.integers(0, 3), st.integers(-3, 3))
def test_two_pi_periodic(seed, coord, turns):
    rng = np.random.default_rng(seed)
    layer = FourierKanLayer.random(4, 3, 5, rng)
    x = rng.uniform(-3, 3, 4)
    shifted = x.copy()
    shifted[coord] += 2 * np.pi * turns
    np.testing.assert_allclose(layer.forward(shifted), layer.forward(x), atol=1e-9, rtol=0)


@given(st.integers(0, 2**32 - 1))
def test_linear_in_coefficients(seed):
    rng = np.random.default_rng(seed)
    l1 = FourierKanLayer.random(3, 2, 4, rng)
    l2 = FourierKanLayer.random(3, 2, 4, rng)
    both = l1.with_parameters(l1.parameters() + l2.parameters())
    x = rng.uniform(-4, 4, 3)
    np.testing.assert_allclose(both.forward(x), l1.forward(x) + l2.forward(x), atol=1e-12, rtol=0)


def test_serialization_round_trip_and_layout(tmp_path):
    layer = FourierKanLayer.random(4, 3, 5, seed=9)
    path = tmp_path / "layer.bin"
    layer.save(path)
    data = path.read_bytes()
    assert struct.unpack("<3i", data[:12]) == (4, 3, 5)
    assert len(data) == 12 + 8 * (2 * 60 + 3)
    first = struct.unpack("<d", data[12:20])[0]
    assert first == layer.a[0, 0, 0]
    back = FourierKanLayer.load(path)
    np.testing.assert_array_equal(back.parameters(), layer.parameters())


def test_load_rejects_truncated(tmp_path):
    path = tmp_path / "layer.bin"
    FourierKanLayer.random(2, 2, seed=0).save(path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        FourierKanLayer.load(path)


def test_mask_scores_identity_stack():
    feats = np.eye(8)
    scores = mask_scores(feats, feats, [identity_layer(8)])
    assert scores.shape == (8, 8)
    assert np.all(np.diag(scores) >= 0.9)
    off = scores - np.diag(np.diag(scores))
    assert np.all(np.diag(scores) > np.abs(off).sum(axis=1))


def test_mask_scores_single_pair(rng):
    layer = FourierKanLayer.random(5, 5, seed=2)
    s, z = rng.normal(size=5), rng.normal(size=5)
    out = mask_scores(s[None], z[None], [layer])
    assert out.shape == (1, 1)
    assert out[0, 0] == pytest.approx(z @ layer.forward(s), abs=1e-12)


def test_mask_scores_shape(rng):
    stack = [FourierKanLayer.random(8, 16, seed=0), FourierKanLayer.random(16, 8, seed=1)]
    feats, queries = rng.normal(size=(7, 8)), rng.normal(size=(3, 8))
    out = mask_scores(feats, queries, stack)
    assert out.shape == (3, 7)
    np.testing.assert_allclose(out, queries @ apply_stack(stack, feats).T, atol=1e-12)
