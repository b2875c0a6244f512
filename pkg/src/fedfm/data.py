"""Synthetic and CSV datasets, and the non-IID client partitioners.

Three label-skew schemes are provided:

* ``partition_dirichlet`` -- per-category client proportions drawn from a
  symmetric Dirichlet (NIID-1);
* ``partition_dominant`` -- equal-size clients, each with one dominant
  category (NIID-2);
* ``partition_missing`` -- each client lacks ``x`` categories entirely (NIID-3).

All randomness comes from an explicit integer seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ParseError

VARIANCE_EPS = 1e-12


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ContractError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ContractError(f"{self.inputs.shape[0]} inputs but labels of shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass
class ClientSplit:
    """Per-client datasets plus the source indices each one was drawn from.

    ``unassigned`` holds source indices no client received; it is empty
    for every scheme except ``partition_dominant``, whose equal-size rule
    can leave surplus samples behind.
    """

    clients: list[LabeledDataset]
    indices: list[np.ndarray]
    counts: np.ndarray
    unassigned: np.ndarray

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clients], dtype=np.int64)

    def weights(self) -> np.ndarray:
        sizes = self.sizes().astype(np.float64)
        return sizes / sizes.sum()


def _make_split(ds: LabeledDataset, indices: list[np.ndarray]) -> ClientSplit:
    indices = [np.sort(np.asarray(ix, dtype=np.int64)) for ix in indices]
    clients = [ds.subset(ix) for ix in indices]
    counts = np.stack([c.class_counts() for c in clients]) if clients else np.zeros((0, ds.num_classes), np.int64)
    used = np.zeros(len(ds), dtype=bool)
    for ix in indices:
        used[ix] = True
    return ClientSplit(clients, indices, counts, np.flatnonzero(~used))


def gen_gaussian_mixture(
    C: int, d_in: int, n_per_class: int, separation: float, seed: int, modes_per_class: int = 1
) -> LabeledDataset:
    """Unit-variance Gaussian blobs with means at pairwise distance >= ``separation``.

    Each category is itself a mixture of ``modes_per_class`` blobs sharing
    its ``n_per_class`` samples evenly, which makes the decision boundary
    nonlinear when greater than one. With ``M = C * modes_per_class`` means
    in total, they form a random orthonormal frame scaled so every pair is
    exactly ``separation`` apart when ``d_in >= M``; otherwise the best of
    several random draws of unit directions is rescaled so the closest pair
    sits at ``separation``.
    """
    if C < 2:
        raise ConfigError(f"need at least two categories, got C={C}")
    if not separation > 0:
        raise ConfigError(f"separation must be positive, got {separation}")
    if d_in < 1 or n_per_class < 1 or modes_per_class < 1:
        raise ConfigError("d_in, n_per_class and modes_per_class must be positive")
    M = C * modes_per_class
    rng = np.random.default_rng(seed)
    if d_in >= M:
        q, _ = np.linalg.qr(rng.standard_normal((d_in, M)))
        means = q.T * (separation / np.sqrt(2.0))
    else:
        best, best_gap = None, -1.0
        for _ in range(64):
            dirs = rng.standard_normal((M, d_in))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            gap = _min_pairwise_distance(dirs)
            if gap > best_gap:
                best, best_gap = dirs, gap
        if best_gap < 1e-3:
            raise ConfigError(f"d_in={d_in} is too small to place {M} distinct means {separation} apart")
        means = best * (separation / best_gap)

    labels = np.repeat(np.arange(C), n_per_class)
    modes = np.tile(np.arange(n_per_class) % modes_per_class, C)
    inputs = means[labels * modes_per_class + modes] + rng.standard_normal((labels.size, d_in))
    order = rng.permutation(labels.size)
    return LabeledDataset(inputs[order], labels[order], C)


def _min_pairwise_distance(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    dist[np.diag_indices_from(dist)] = np.inf
    return float(dist.min())


def load_csv_dataset(path, C: int) -> LabeledDataset:
    """Read ``label,feat_1,...,feat_m`` rows and standardize every feature column.

    Columns whose variance is below ``VARIANCE_EPS`` become all-zero.
    """
    rows, labels = [], []
    width = None
    with Path(path).open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ParseError("row needs a label and at least one feature", lineno)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"expected {width} fields, found {len(row)}", lineno)
            try:
                label = int(row[0])
            except ValueError:
                raise ParseError(f"label {row[0]!r} is not an integer", lineno) from None
            if not 0 <= label < C:
                raise ParseError(f"label {label} outside [0, {C})", lineno)
            try:
                feats = [float(cell) for cell in row[1:]]
            except ValueError as exc:
                raise ParseError(f"non-numeric feature ({exc})", lineno) from None
            if not np.all(np.isfinite(feats)):
                raise ParseError("non-finite feature value", lineno)
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    x = np.array(rows, dtype=np.float64)
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    safe = var >= VARIANCE_EPS
    out = np.zeros_like(x)
    out[:, safe] = (x[:, safe] - mean[safe]) / np.sqrt(var[safe])
    return LabeledDataset(out, np.array(labels), C)


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total``, as close as possible to ``total * proportions``."""
    raw = total * np.asarray(proportions, dtype=np.float64)
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort: ties go to the lowest index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(ds: LabeledDataset, K: int, beta: float, seed: int) -> ClientSplit:
    if K < 1:
        raise ConfigError(f"K must be at least 1, got {K}")
    if not beta > 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    if K > len(ds):
        raise ConfigError(f"cannot give {K} clients a sample each from {len(ds)} samples")
    rng = np.random.default_rng(seed)
    buckets = [[[] for _ in range(ds.num_classes)] for _ in range(K)]
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        props = rng.dirichlet(np.full(K, beta))
        counts = _largest_remainder(idx.size, props)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for k in range(K):
            buckets[k][c] = list(idx[bounds[k] : bounds[k + 1]])

    # every client must train each round: borrow from the largest client's largest bucket
    for k in range(K):
        if sum(len(b) for b in buckets[k]) == 0:
            sizes = [sum(len(b) for b in buckets[j]) for j in range(K)]
            donor = int(np.argmax(sizes))
            cat = int(np.argmax([len(b) for b in buckets[donor]]))
            buckets[k][cat].append(buckets[donor][cat].pop())

    return _make_split(ds, [np.array([i for b in buckets[k] for i in b], dtype=np.int64) for k in range(K)])


def partition_dominant(
    ds: LabeledDataset, K: int, dominant_frac: float, seed: int, client_size: int | None = None
) -> ClientSplit:
    """Equal-size clients; client ``k`` draws ``dominant_frac`` of its data from category ``k mod C``.

    The rest of each client's quota is spread evenly over the other
    categories, with leftover units rotated so that on balanced data with
    ``K == C`` every sample is used. ``client_size`` defaults to
    ``len(ds) // K``.
    """
    C = ds.num_classes
    if not 0 < dominant_frac < 1:
        raise ConfigError(f"dominant_frac must lie in (0, 1), got {dominant_frac}")
    if not 1 <= K <= C:
        raise ConfigError(f"dominant partition needs 1 <= K <= C, got K={K}, C={C}")
    size = len(ds) // K if client_size is None else int(client_size)
    if size < 1:
        raise ConfigError("client size must be positive")

    n_dom = int(round(dominant_frac * size))
    rest = size - n_dom
    base, extra = divmod(rest, C - 1)
    demand = np.zeros((K, C), dtype=np.int64)
    for k in range(K):
        dom = k % C
        demand[k, dom] = n_dom
        for pos in range(C - 1):
            c = (dom + 1 + pos) % C
            demand[k, c] = base + (1 if pos < extra else 0)

    available = ds.class_counts()
    need = demand.sum(axis=0)
    short = {c: int(need[c] - available[c]) for c in range(C) if need[c] > available[c]}
    if short:
        detail = ", ".join(f"category {c} short by {s}" for c, s in short.items())
        raise ConfigError(f"not enough samples for the dominant partition: {detail}")

    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(C)]
    cursor = np.zeros(C, dtype=np.int64)
    indices = []
    for k in range(K):
        parts = []
        for c in range(C):
            take = demand[k, c]
            parts.append(pools[c][cursor[c] : cursor[c] + take])
            cursor[c] += take
        indices.append(np.concatenate(parts))
    return _make_split(ds, indices)


def partition_missing(ds: LabeledDataset, K: int, x: int, seed: int) -> ClientSplit:
    """Each client holds ``C - x`` categories; the other ``x`` are absent.

    Permitted categories form a cyclic window whose start rotates across
    clients from a seeded offset. Samples of each category are split
    evenly among the clients permitted to hold it.
    """
    C = ds.num_classes
    if not 1 <= x < C:
        raise ConfigError(f"missing-category count x must satisfy 1 <= x < C={C}, got {x}")
    if K < 1:
        raise ConfigError(f"K must be at least 1, got {K}")
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(C))
    window = C - x
    permitted = np.zeros((K, C), dtype=bool)
    for k in range(K):
        start = offset + (k if K >= C else (k * C) // K)
        for j in range(window):
            permitted[k, (start + j) % C] = True
    uncovered = [c for c in range(C) if not permitted[:, c].any() and np.any(ds.labels == c)]
    if uncovered:
        raise ConfigError(f"K={K} clients missing {x} categories each cannot cover categories {uncovered}")

    buckets = [[] for _ in range(K)]
    for c in range(C):
        holders = np.flatnonzero(permitted[:, c])
        if holders.size == 0:
            continue
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        for k, chunk in zip(holders, np.array_split(idx, holders.size)):
            buckets[k].append(chunk)
    return _make_split(ds, [np.concatenate(b) if b else np.array([], np.int64) for b in buckets])


def holdout_split(
    ds: LabeledDataset, frac: float, seed: int, strict: bool = True
) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split into ``(kept, held_out)``.

    Each category contributes ``round(frac * n_c)`` samples to the held-out
    part. With ``strict`` a category with fewer than two samples is an
    error; otherwise such categories stay entirely in the kept part.
    """
    if not 0 < frac < 1:
        raise ConfigError(f"holdout fraction must lie in (0, 1), got {frac}")
    rng = np.random.default_rng(seed)
    keep, hold = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 2:
            if strict:
                raise ConfigError(f"category {c} has {idx.size} sample(s); stratified holdout needs 2")
            keep.append(idx)
            continue
        idx = rng.permutation(idx)
        n_hold = int(round(frac * idx.size))
        hold.append(idx[:n_hold])
        keep.append(idx[n_hold:])
    keep_idx = np.sort(np.concatenate(keep)) if keep else np.array([], np.int64)
    hold_idx = np.sort(np.concatenate(hold)) if hold else np.array([], np.int64)
    return ds.subset(keep_idx), ds.subset(hold_idx)
