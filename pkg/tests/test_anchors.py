import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import linear_params
from fedfm.anchors import (
    LocalAnchorReport,
    aggregate_uniform,
    aggregate_weighted,
    anchor_displacement,
    direct_global_anchors,
    local_anchors,
    renormalize,
)
from fedfm.data import LabeledDataset, gen_gaussian_mixture, partition_dirichlet
from fedfm.errors import ContractError
from fedfm.losses import AnchorSet, normalize_features
from fedfm.metrics import global_objective
from fedfm.nn import init_mlp


def identity_net(d, C):
    # no hidden layer: the feature is the raw input
    return linear_params(np.zeros((d, C)), np.zeros(C))


def report(cid, rows, counts):
    counts = np.asarray(counts)
    return LocalAnchorReport(cid, np.asarray(rows, float), counts, counts > 0)


def test_singleton_and_hand_mean():
    p = identity_net(2, 3)
    ds = LabeledDataset(np.array([[3.0, 4.0], [1.0, 0.0], [0.0, 2.0]]), [2, 0, 0], 3)
    r = local_anchors(p, ds)
    np.testing.assert_allclose(r.anchors[2], [0.6, 0.8], rtol=1e-15)
    np.testing.assert_allclose(r.anchors[0], [0.5, 0.5], rtol=1e-15)
    assert not r.presence[1] and np.all(r.anchors[1] == 0)
    np.testing.assert_array_equal(r.counts, [2, 0, 1])


def test_local_anchors_empty_is_error():
    with pytest.raises(ContractError):
        local_anchors(identity_net(2, 2), LabeledDataset(np.zeros((0, 2)), [], 2))


def test_local_anchors_leave_params_untouched():
    p = init_mlp([3, 5, 2], 0)
    before = p.flat().copy()
    local_anchors(p, gen_gaussian_mixture(2, 3, 10, 2.0, 0))
    np.testing.assert_array_equal(p.flat(), before)


def test_weighted_example_matches_pooled_features():
    a = report(0, [[1.0, 1.0]], [2])
    b = report(1, [[3.0, 3.0]], [2])
    out = aggregate_weighted([a, b])
    np.testing.assert_array_equal(out.anchors[0], [2.0, 2.0])
    pooled = np.array([[1.0, 1.0], [1.0, 1.0], [3.0, 3.0], [3.0, 3.0]]).mean(0)
    np.testing.assert_allclose(out.anchors[0], pooled, rtol=1e-15)


def test_weighted_single_client_and_previous():
    r = report(0, [[0.2, 0.1], [0.0, 0.0]], [4, 0])
    out = aggregate_weighted([r])
    np.testing.assert_array_equal(out.anchors, r.anchors)
    np.testing.assert_array_equal(out.present, [True, False])
    prev = AnchorSet(np.array([[9.0, 9.0], [5.0, 5.0]]), np.array([True, True]))
    out = aggregate_weighted([r], previous=prev)
    np.testing.assert_array_equal(out.anchors[1], [5.0, 5.0])
    assert out.present.all()


def test_uniform_examples():
    same = aggregate_uniform([report(0, [[0.3, 0.4]], [1]), report(1, [[0.3, 0.4]], [7])], None)
    np.testing.assert_allclose(same.anchors[0], [0.3, 0.4], rtol=1e-15)
    out = aggregate_uniform([report(0, [[1.0, 1.0]], [1]), report(1, [[3.0, 3.0]], [9])], None)
    np.testing.assert_array_equal(out.anchors[0], [2.0, 2.0])
    prev = AnchorSet(np.array([[5.0, 5.0]]), np.array([True]))
    out = aggregate_uniform([report(0, [[0.0, 0.0]], [0]), report(1, [[1.0, 1.0]], [3])], prev)
    np.testing.assert_array_equal(out.anchors[0], [3.0, 3.0])
    out = aggregate_uniform([report(0, [[0.0, 0.0]], [0]), report(1, [[1.0, 1.0]], [3])], AnchorSet.empty(1, 2))
    np.testing.assert_array_equal(out.anchors[0], [1.0, 1.0])


def test_sentinel_rows_never_enter_arithmetic():
    a = report(0, [[1.0, 0.0], [0.0, 0.0]], [2, 0])
    b = report(1, [[0.0, 1.0], [0.0, 1.0]], [1, 1])
    a.anchors[1] = np.nan
    for out in (aggregate_weighted([a, b]), aggregate_uniform([a, b], None)):
        assert np.all(np.isfinite(out.anchors))
    np.testing.assert_array_equal(aggregate_weighted([a, b]).anchors[1], [0.0, 1.0])


def _federation(seed, K=4):
    ds = gen_gaussian_mixture(5, 6, 30, 3.0, seed)
    split = partition_dirichlet(ds, K, 0.3, seed)
    p = init_mlp([6, 8, 5], seed)
    return p, split


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.randoms(use_true_random=False))
def test_weighted_equals_pooled_and_order_free(seed, K, rnd):
    p, split = _federation(seed, K)
    reports = [local_anchors(p, c, k) for k, c in enumerate(split.clients)]
    agg = aggregate_weighted(reports)
    direct = direct_global_anchors(p, split.clients)
    np.testing.assert_array_equal(agg.present, direct.present)
    assert np.max(np.abs(agg.anchors - direct.anchors)) <= 1e-12
    rnd.shuffle(reports)
    again = aggregate_weighted(reports)
    np.testing.assert_array_equal(again.anchors, agg.anchors)
    order = list(range(K))
    rnd.shuffle(order)
    shuffled = direct_global_anchors(p, [split.clients[i] for i in order])
    assert np.max(np.abs(shuffled.anchors - direct.anchors)) <= 1e-12


def test_direct_single_category():
    ds = LabeledDataset(np.array([[1.0, 0.0], [0.0, 1.0]]), [1, 1], 3)
    out = direct_global_anchors(identity_net(2, 3), [ds])
    np.testing.assert_array_equal(out.present, [False, True, False])
    assert np.all(out.anchors[[0, 2]] == 0)


def test_pooled_mean_minimizes_matching_objective():
    p, split = _federation(3)
    best = direct_global_anchors(p, split.clients)
    base = global_objective(p, best, split, lam=1.0, variant="l2")
    rng = np.random.default_rng(0)
    for scale in (1e-4, 1e-2, 0.3):
        for _ in range(10):
            moved = best.copy()
            moved.anchors[moved.present] += scale * rng.standard_normal(moved.anchors[moved.present].shape)
            assert global_objective(p, moved, split, lam=1.0, variant="l2") >= base


def test_renormalize_and_displacement():
    a = AnchorSet(np.array([[0.0, 2.0], [0.0, 0.0]]), np.array([True, False]))
    r = renormalize(a)
    np.testing.assert_array_equal(r.anchors[0], normalize_features(np.array([[0.0, 2.0]]))[0])
    assert anchor_displacement(r, a) == pytest.approx(1.0)
    assert np.isnan(anchor_displacement(a, None))
