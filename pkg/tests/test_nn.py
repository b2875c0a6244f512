import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, linear_params, rel_err
from fedfm.errors import ContractError, DimensionError, NumericError
from fedfm.losses import cross_entropy, l2_match_loss, normalize_backward, normalize_features, AnchorSet
from fedfm.nn import (
    MlpParams,
    init_mlp,
    mlp_backward,
    mlp_forward,
    param_count,
    sgd_step,
    weighted_param_sum,
)


def straight_line_forward(params, x):
    """Per-sample, per-unit loops; shares nothing with the vectorized path."""
    logits, feats = [], []
    for row in x:
        h = list(row)
        for l, (W, b) in enumerate(zip(params.weights, params.biases)):
            z = [b[j] + sum(h[i] * W[i, j] for i in range(len(h))) for j in range(W.shape[1])]
            if l == len(params.weights) - 1:
                feats.append(h)
                logits.append(z)
            else:
                h = [max(v, 0.0) for v in z]
    return np.array(logits), np.array(feats)


def test_identity_linear_net():
    p = linear_params(np.eye(3), np.zeros(3))
    cache = mlp_forward(p, np.eye(3))
    np.testing.assert_array_equal(cache.logits, np.eye(3))


def test_zero_net_gives_zero_logits(rng):
    p = init_mlp([4, 5, 3], 0)
    p = p.zeros_like()
    cache = mlp_forward(p, rng.standard_normal((6, 4)) * 100)
    assert np.all(cache.logits == 0)


def test_forward_matches_straight_line(rng):
    p = init_mlp([2, 16, 8, 3], 7)
    for b in p.biases:
        b += rng.standard_normal(b.shape) * 0.1
    x = rng.standard_normal((10, 2))
    cache = mlp_forward(p, x)
    logits, feats = straight_line_forward(p, x)
    assert np.max(np.abs(cache.logits - logits)) < 1e-12
    assert np.max(np.abs(cache.feature - feats)) < 1e-12
    assert cache.logits.shape == (10, 3) and cache.feature.shape == (10, 8)


def test_feature_is_last_hidden_activation(rng):
    p = init_mlp([3, 5, 4, 2], 1)
    cache = mlp_forward(p, rng.standard_normal((4, 3)))
    assert cache.feature is cache.activations[-1]


def test_forward_shape_error_names_layer():
    p = init_mlp([3, 4, 2], 0)
    with pytest.raises(DimensionError, match="layer 0"):
        mlp_forward(p, np.zeros((2, 5)))


def test_zero_sensitivity_gives_zero_grads(rng):
    p = init_mlp([3, 6, 4, 2], 0)
    cache = mlp_forward(p, rng.standard_normal((5, 3)))
    g = mlp_backward(p, cache, np.zeros_like(cache.logits), np.zeros_like(cache.feature))
    assert all(np.all(a == 0) for a in g.arrays())


def _nudged_net(seed, dims):
    p = init_mlp(dims, seed)
    for b in p.biases:
        b += 0.1
    return p


def test_backward_cross_entropy_matches_fd(rng):
    p = _nudged_net(3, [4, 7, 5, 3])
    x = rng.standard_normal((6, 4))
    y = rng.integers(3, size=6)
    cache = mlp_forward(p, x)
    _, d_logits = cross_entropy(cache.logits, y)
    grads = mlp_backward(p, cache, d_logits, np.zeros_like(cache.feature))
    probe = p.copy()
    for a_analytic, a_probe in zip(grads.arrays(), probe.arrays()):
        num = central_diff(lambda: cross_entropy(mlp_forward(probe, x).logits, y)[0], a_probe)
        assert rel_err(a_analytic, num) < 1e-4


def test_backward_l2_matching_matches_fd(rng):
    p = _nudged_net(4, [3, 6, 4, 3])
    x = rng.standard_normal((5, 3))
    y = rng.integers(3, size=5)
    a = rng.standard_normal((3, 4))
    anchors = AnchorSet(a / np.linalg.norm(a, axis=1, keepdims=True), np.ones(3, bool))

    def loss(params):
        return l2_match_loss(normalize_features(mlp_forward(params, x).feature), y, anchors)[0]

    cache = mlp_forward(p, x)
    _, d_n = l2_match_loss(normalize_features(cache.feature), y, anchors)
    grads = mlp_backward(p, cache, np.zeros_like(cache.logits), normalize_backward(cache.feature, d_n))
    probe = p.copy()
    for a_analytic, a_probe in zip(grads.arrays(), probe.arrays()):
        assert rel_err(a_analytic, central_diff(lambda: loss(probe), a_probe)) < 1e-4


def test_backward_shape_errors(rng):
    p = init_mlp([3, 4, 2], 0)
    cache = mlp_forward(p, rng.standard_normal((2, 3)))
    with pytest.raises(DimensionError):
        mlp_backward(p, cache, np.zeros((3, 2)), np.zeros_like(cache.feature))
    with pytest.raises(DimensionError):
        mlp_backward(p, cache, np.zeros_like(cache.logits), np.zeros((2, 5)))


def _scalar_params(v):
    return MlpParams([1, 1], [np.array([[v]])], [np.array([0.0])])


def test_plain_sgd_step():
    p = init_mlp([3, 2], 0)
    g = init_mlp([3, 2], 1)
    new, _ = sgd_step(p, g, p.zeros_like(), lr=0.1, momentum=0.0, weight_decay=0.0)
    for a, b, c in zip(new.arrays(), p.arrays(), g.arrays()):
        np.testing.assert_array_equal(a, b - 0.1 * c)


def test_zero_grad_fixed_point():
    p = init_mlp([3, 2], 0)
    new, buf = sgd_step(p, p.zeros_like(), p.zeros_like(), lr=0.1, momentum=0.9, weight_decay=0.0)
    for a, b in zip(new.arrays(), p.arrays()):
        np.testing.assert_array_equal(a, b)


def test_momentum_two_steps_hand_unrolled():
    lr, m, wd = 0.01, 0.9, 1e-5
    p0, g1, g2 = 2.0, 0.5, -0.3
    v1 = g1 + wd * p0
    p1 = p0 - lr * v1
    v2 = m * v1 + g2 + wd * p1
    p2 = p1 - lr * v2

    p = _scalar_params(p0)
    buf = p.zeros_like()
    p, buf = sgd_step(p, _scalar_params(g1), buf, lr, m, wd)
    p, buf = sgd_step(p, _scalar_params(g2), buf, lr, m, wd)
    assert abs(p.weights[0][0, 0] - p2) < 1e-12
    assert abs(buf.weights[0][0, 0] - v2) < 1e-12


def test_sgd_rejects_bad_rates_and_nan():
    p = init_mlp([2, 2], 0)
    with pytest.raises(ContractError):
        sgd_step(p, p, p.zeros_like(), lr=0.0, momentum=0.0, weight_decay=0.0)
    with pytest.raises(ContractError):
        sgd_step(p, p, p.zeros_like(), lr=0.1, momentum=1.0, weight_decay=0.0)
    g = p.zeros_like()
    g.biases[0][1] = np.nan
    with pytest.raises(NumericError, match="layer 0"):
        sgd_step(p, g, p.zeros_like(), 0.1, 0.0, 0.0)


def test_weighted_sum_examples():
    a, b = _scalar_params(4.0), _scalar_params(8.0)
    assert weighted_param_sum([a, b], [0.25, 0.75]).weights[0][0, 0] == 7.0
    out = weighted_param_sum([a, b], [1.0, 0.0])
    np.testing.assert_array_equal(out.weights[0], a.weights[0])
    m = init_mlp([3, 4, 2], 5)
    same = weighted_param_sum([m, m, m], [0.2, 0.3, 0.5])
    for x, y in zip(same.arrays(), m.arrays()):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-15)


def test_weighted_sum_contract_errors():
    a, b = init_mlp([3, 2], 0), init_mlp([3, 3, 2], 0)
    with pytest.raises(DimensionError):
        weighted_param_sum([a, b], [0.5, 0.5])
    with pytest.raises(ContractError):
        weighted_param_sum([a, a], [0.5, 0.6])
    with pytest.raises(ContractError):
        weighted_param_sum([a, a], [1.5, -0.5])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=5), st.randoms(use_true_random=False))
def test_weighted_sum_permutation_and_linearity(raw, rnd):
    w = np.array(raw) / sum(raw)
    models = [init_mlp([3, 4, 2], i) for i in range(len(w))]
    out = weighted_param_sum(models, w)
    order = list(range(len(w)))
    rnd.shuffle(order)
    perm = weighted_param_sum([models[i] for i in order], w[order])
    for x, y in zip(out.flat(), perm.flat()):
        assert math.isclose(x, y, rel_tol=1e-12, abs_tol=1e-14)
    direct = sum(c * m.flat() for c, m in zip(w, models))
    np.testing.assert_allclose(out.flat(), direct, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("dims, expected", [([2, 3], 9), ([7, 4], 7 * 4 + 4), ([10, 32, 10], 10 * 32 + 32 + 32 * 10 + 10)])
def test_param_count(dims, expected):
    assert param_count(init_mlp(dims, 0)) == expected


def test_init_is_seeded_and_bounded():
    a, b = init_mlp([6, 5, 3], 9), init_mlp([6, 5, 3], 9)
    for x, y in zip(a.arrays(), b.arrays()):
        assert x.tobytes() == y.tobytes()
    assert np.all(np.abs(a.weights[0]) <= math.sqrt(6 / 11))
