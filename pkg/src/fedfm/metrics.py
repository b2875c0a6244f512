"""Evaluation: accuracy, the global objective, the anchor-update monitor and
feature-space clustering quality (k-means, NMI, silhouette)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import features_of
from .data import ClientSplit, LabeledDataset
from .errors import ContractError
from .losses import AnchorSet, cg_loss, cross_entropy, l2_match_loss, normalize_features
from .nn import MlpParams, mlp_forward


def predict(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest category on ties
    return np.argmax(mlp_forward(params, inputs).logits, axis=1)


def accuracy(params: MlpParams, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(params, ds.inputs) == ds.labels))


def client_objective(
    params: MlpParams, anchors: AnchorSet | None, ds: LabeledDataset, lam: float, variant: str = "l2", alpha: float = 1.0
) -> tuple[float, float]:
    """Task loss and matching loss of one client over its whole dataset."""
    cache = mlp_forward(params, ds.inputs)
    task, _ = cross_entropy(cache.logits, ds.labels)
    if variant == "none" or lam == 0 or anchors is None:
        return task, 0.0
    normed = normalize_features(cache.feature)
    if variant == "l2":
        match, _ = l2_match_loss(normed, ds.labels, anchors)
    else:
        match, _ = cg_loss(normed, ds.labels, anchors, alpha)
    return task, match


def global_objective(
    params: MlpParams,
    anchors: AnchorSet | None,
    splits: ClientSplit,
    lam: float,
    variant: str = "l2",
    alpha: float = 1.0,
) -> float:
    """``sum_k p_k (F_k + lam * Q_k)`` with ``p_k`` the relative client size."""
    total = 0.0
    for p_k, ds in zip(splits.weights(), splits.clients):
        task, match = client_objective(params, anchors, ds, lam, variant, alpha)
        total += p_k * (task + lam * match)
    return float(total)


def lemma2_monitor(
    params: MlpParams, old_anchors: AnchorSet, new_anchors: AnchorSet, splits: ClientSplit, lam: float
) -> tuple[float, float]:
    """Objective under the old and the freshly aggregated anchors (L2 matching).

    The task term does not depend on the anchors, so it is computed once
    and both values share it exactly.
    """
    weights = splits.weights()
    task = q_old = q_new = 0.0
    for p_k, ds in zip(weights, splits.clients):
        cache = mlp_forward(params, ds.inputs)
        f_k, _ = cross_entropy(cache.logits, ds.labels)
        normed = normalize_features(cache.feature)
        task += p_k * f_k
        q_old += p_k * l2_match_loss(normed, ds.labels, old_anchors)[0]
        q_new += p_k * l2_match_loss(normed, ds.labels, new_anchors)[0]
    return float(task + lam * q_old), float(task + lam * q_new)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    sse_history: list[float]
    n_iter: int


def _sq_dists(x: np.ndarray, y: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Squared Euclidean distances from explicit differences (no cancellation)."""
    out = np.empty((x.shape[0], y.shape[0]))
    for i in range(0, x.shape[0], chunk):
        out[i : i + chunk] = ((x[i : i + chunk, None, :] - y[None, :, :]) ** 2).sum(-1)
    return out


def kmeans(features: np.ndarray, C: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-8) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    ``sse_history[i]`` is the within-cluster SSE after the i-th update
    step. An empty cluster is reseeded at the point farthest from its
    current centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if C < 1 or n < C:
        raise ContractError(f"need 1 <= C <= n, got C={C}, n={n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((C, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(1)
    for j in range(1, C):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centroids[j] = x[pick]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(1))

    history = []
    assign = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        assign = np.argmin(d, axis=1)
        point_d = d[np.arange(n), assign]
        for j in range(C):
            if not np.any(assign == j):
                sizes = np.bincount(assign, minlength=C)
                movable = np.where(sizes[assign] > 1, point_d, -1.0)
                far = int(np.argmax(movable))
                assign[far] = j
                point_d[far] = 0.0
        new = np.stack([x[assign == j].mean(0) for j in range(C)])
        history.append(float(((x - new[assign]) ** 2).sum()))
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < tol:
            break
    return KMeansResult(assign, centroids, history, it)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assignments, labels) -> float:
    """Mutual information over the arithmetic mean of the two entropies (nats)."""
    a = np.asarray(assignments)
    b = np.asarray(labels)
    if a.shape != b.shape:
        raise ContractError("assignments and labels differ in length")
    if a.size == 0:
        return 0.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    h_a = _entropy(table.sum(1))
    h_b = _entropy(table.sum(0))
    n = a.size
    nz = table > 0
    outer = np.outer(table.sum(1), table.sum(0))
    mi = float(np.sum(table[nz] / n * np.log(table[nz] * n / outer[nz])))
    denom = 0.5 * (h_a + h_b)
    if denom <= 0.0:
        return 0.0
    return float(min(max(mi / denom, 0.0), 1.0))


def silhouette(features: np.ndarray, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Samples in singleton clusters score 0; a sample with ``a == b == 0``
    also scores 0.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    cats, inv = np.unique(labels, return_inverse=True)
    if cats.size < 2:
        raise ContractError("silhouette needs at least two clusters")
    n = x.shape[0]
    dist = np.sqrt(_sq_dists(x, x))
    sizes = np.bincount(inv)
    sums = np.zeros((n, cats.size))
    for j in range(cats.size):
        sums[:, j] = dist[:, inv == j].sum(1)
    own = sizes[inv]
    rows = np.arange(n)
    a = np.where(own > 1, sums[rows, inv] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[rows, inv] = np.inf
    b = mean_other.min(1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


@dataclass
class FeatureDump:
    features: np.ndarray
    labels: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        if not (len(self.features) == len(self.labels) == len(self.predicted)):
            raise ContractError("feature dump columns differ in length")

    def write_csv(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with tmp.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "pred"] + [f"f_{i + 1}" for i in range(self.features.shape[1])])
            for lab, pred, row in zip(self.labels, self.predicted, self.features):
                w.writerow([int(lab), int(pred)] + [repr(float(v)) for v in row])
        tmp.replace(path)


def feature_dump(params: MlpParams, ds: LabeledDataset, cap: int | None = 2000, seed: int = 0) -> FeatureDump:
    """Normalized features and predictions of ``params`` on (a seeded subsample of) ``ds``."""
    idx = np.arange(len(ds))
    if cap is not None and len(ds) > cap:
        idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=cap, replace=False))
    sub = ds.subset(idx)
    return FeatureDump(features_of(params, sub.inputs), sub.labels, predict(params, sub.inputs))


def feature_quality(dump: FeatureDump, C: int, seed: int = 0) -> tuple[float, float]:
    """NMI of k-means clusters against labels, and silhouette of the true labels."""
    km = kmeans(dump.features, C, seed=seed)
    return nmi(km.assignments, dump.labels), silhouette(dump.features, dump.labels)
