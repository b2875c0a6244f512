import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import linear_params
from fedfm.anchors import direct_global_anchors, features_of
from fedfm.checks import brute_force_silhouette
from fedfm.data import LabeledDataset, gen_gaussian_mixture, partition_dirichlet
from fedfm.errors import ContractError
from fedfm.losses import AnchorSet, combined_local_loss, cross_entropy
from fedfm.metrics import (
    FeatureDump,
    accuracy,
    feature_dump,
    feature_quality,
    global_objective,
    kmeans,
    lemma2_monitor,
    nmi,
    silhouette,
)
from fedfm.nn import init_mlp, mlp_forward


def test_accuracy_cases():
    ds = gen_gaussian_mixture(10, 4, 10, 3.0, 0)
    constant = linear_params(np.zeros((4, 10)), np.eye(10)[3])
    assert accuracy(constant, ds) == 0.1
    # features are raw inputs; a net that copies the label into the logits is perfect
    onehot = LabeledDataset(np.eye(3)[[0, 1, 2]], [0, 1, 2], 3)
    assert accuracy(linear_params(np.eye(3), np.zeros(3)), onehot) == 1.0
    three = LabeledDataset(np.eye(3), [0, 1, 0], 3)
    assert accuracy(linear_params(np.eye(3), np.zeros(3)), three) == pytest.approx(2 / 3)
    # ties go to the lowest index
    assert accuracy(linear_params(np.zeros((3, 3)), np.zeros(3)), LabeledDataset(np.eye(3), [0, 0, 0], 3)) == 1.0
    with pytest.raises(ContractError):
        accuracy(constant, LabeledDataset(np.zeros((0, 4)), [], 10))


def _setup(seed=0, K=3):
    ds = gen_gaussian_mixture(4, 5, 20, 3.0, seed)
    split = partition_dirichlet(ds, K, 0.5, seed)
    p = init_mlp([5, 7, 4], seed)
    return p, split


def test_global_objective_lambda_zero_is_weighted_task_loss():
    p, split = _setup()
    a = direct_global_anchors(p, split.clients)
    expected = sum(
        len(c) / sum(split.sizes()) * cross_entropy(mlp_forward(p, c.inputs).logits, c.labels)[0] for c in split.clients
    )
    assert global_objective(p, a, split, 0.0) == pytest.approx(expected, rel=1e-14)


def test_q_term_is_within_class_variance():
    p, split = _setup(1)
    a = direct_global_anchors(p, split.clients)
    inputs = np.concatenate([c.inputs for c in split.clients])
    labels = np.concatenate([c.labels for c in split.clients])
    f = features_of(p, inputs)
    variance = np.mean([np.sum((f[i] - f[labels == labels[i]].mean(0)) ** 2) for i in range(len(f))])
    q = global_objective(p, a, split, 1.0) - global_objective(p, a, split, 0.0)
    assert q == pytest.approx(variance, rel=1e-10)


@pytest.mark.parametrize("variant", ["l2", "cg"])
def test_single_client_objective_equals_breakdown(variant):
    p, split = _setup(2, K=1)
    a = direct_global_anchors(p, split.clients)
    c = split.clients[0]
    br, _, _ = combined_local_loss(mlp_forward(p, c.inputs), c.labels, a, 5.0, variant, 0.5)
    assert global_objective(p, a, split, 5.0, variant, 0.5) == pytest.approx(br.total, rel=1e-13)


def test_lemma2_fixed_point_and_strict_decrease():
    p, split = _setup(3)
    a = direct_global_anchors(p, split.clients)
    old, new = lemma2_monitor(p, a, a, split, 50.0)
    assert old == new
    rng = np.random.default_rng(0)
    for _ in range(10):
        moved = a.copy()
        moved.anchors[moved.present] += 0.05 * rng.standard_normal(moved.anchors[moved.present].shape)
        old, new = lemma2_monitor(p, moved, a, split, 50.0)
        assert new < old


def blobs(C, per, seed, spread=0.05, gap=10.0):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((C, 3)) * gap
    labels = np.repeat(np.arange(C), per)
    return centers[labels] + spread * rng.standard_normal((labels.size, 3)), labels


def test_kmeans_recovers_blobs():
    x, y = blobs(4, 25, 0)
    res = kmeans(x, 4, seed=1)
    assert nmi(res.assignments, y) == pytest.approx(1.0)
    one = kmeans(x, 1)
    assert np.all(one.assignments == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kmeans_sse_monotone(seed, C):
    x = np.random.default_rng(seed).standard_normal((40, 2))
    res = kmeans(x, C, seed=seed)
    assert all(b <= a + 1e-9 for a, b in zip(res.sse_history, res.sse_history[1:]))
    assert len(np.unique(res.assignments)) == C


def test_kmeans_deterministic():
    x, _ = blobs(3, 20, 5, spread=2.0)
    a, b = kmeans(x, 3, seed=4), kmeans(x, 3, seed=4)
    np.testing.assert_array_equal(a.assignments, b.assignments)


def test_nmi_hand_cases():
    assert nmi([0, 0, 1, 1], [0, 0, 1, 1]) == pytest.approx(1.0)
    assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)
    assert nmi([0, 1, 0, 1], [0, 0, 1, 1]) == 0.0
    assert nmi([0, 0, 0, 0], [0, 1, 2, 3]) == 0.0
    assert nmi([0, 0], [0, 0]) == 0.0


def test_nmi_matches_library():
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(0)
    for _ in range(10):
        a, b = rng.integers(4, size=60), rng.integers(3, size=60)
        ref = metrics.normalized_mutual_info_score(b, a, average_method="arithmetic")
        assert nmi(a, b) == pytest.approx(ref, abs=1e-12)


def test_silhouette_cases():
    x, y = blobs(2, 20, 0, spread=0.01)
    assert silhouette(x, y) > 0.9
    assert silhouette(np.zeros((6, 2)), [0, 0, 0, 1, 1, 1]) == 0.0
    with pytest.raises(ContractError):
        silhouette(x, np.zeros(len(x)))


def test_silhouette_brute_force_and_library():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((50, 4))
    y = rng.integers(3, size=50)
    y[0] = 3  # a singleton cluster
    assert abs(silhouette(x, y) - brute_force_silhouette(x, y)) <= 1e-12
    metrics = pytest.importorskip("sklearn.metrics")
    assert silhouette(x, y) == pytest.approx(metrics.silhouette_score(x, y), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.permutations(list(range(4))))
def test_relabeling_invariance_and_ranges(seed, perm):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((30, 3))
    y = rng.integers(4, size=30)
    y[:4] = np.arange(4)
    a = rng.integers(3, size=30)
    relabeled = np.array(perm)[y]
    assert silhouette(x, relabeled) == pytest.approx(silhouette(x, y), abs=1e-12)
    assert nmi(a, relabeled) == pytest.approx(nmi(a, y), abs=1e-12)
    assert -1 <= silhouette(x, y) <= 1 and 0 <= nmi(a, y) <= 1


def test_feature_dump_csv(tmp_path):
    ds = gen_gaussian_mixture(3, 4, 20, 3.0, 0)
    p = init_mlp([4, 6, 3], 0)
    dump = feature_dump(p, ds, cap=25, seed=1)
    assert len(dump.labels) == 25
    path = tmp_path / "f.csv"
    dump.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "label,pred," + ",".join(f"f_{i}" for i in range(1, 7))
    assert len(lines) == 26
    back = np.array([[float(v) for v in line.split(",")[2:]] for line in lines[1:]])
    np.testing.assert_array_equal(back, dump.features)
    n, s = feature_quality(dump, 3)
    assert 0 <= n <= 1 and -1 <= s <= 1
    with pytest.raises(ContractError):
        FeatureDump(np.zeros((2, 2)), np.zeros(3), np.zeros(2))
