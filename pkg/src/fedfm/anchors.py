"""Anchor lifecycle: per-client category means and their global aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import LabeledDataset
from .errors import ContractError, DimensionError
from .losses import AnchorSet, normalize_features
from .nn import MlpParams, mlp_forward


@dataclass
class LocalAnchorReport:
    client_id: int
    anchors: np.ndarray
    counts: np.ndarray
    presence: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.presence = np.asarray(self.presence, dtype=bool)
        if not np.array_equal(self.presence, self.counts > 0):
            raise ContractError(f"client {self.client_id}: presence flags disagree with counts")
        self.anchors = np.asarray(self.anchors, dtype=np.float64).copy()
        self.anchors[~self.presence] = 0.0

    def as_anchor_set(self, round_tag: int = -1) -> AnchorSet:
        return AnchorSet(self.anchors, self.presence, round_tag)


def features_of(params: MlpParams, inputs: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Normalized feature vectors for every row of ``inputs`` (inference only)."""
    out = [normalize_features(mlp_forward(params, inputs[i : i + chunk]).feature) for i in range(0, len(inputs), chunk)]
    if not out:
        return np.zeros((0, params.feature_dim))
    return np.concatenate(out)


def class_means(features: np.ndarray, labels: np.ndarray, C: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(labels, minlength=C)
    sums = np.zeros((C, features.shape[1]))
    np.add.at(sums, labels, features)
    means = np.zeros_like(sums)
    present = counts > 0
    means[present] = sums[present] / counts[present, None]
    return means, counts


def local_anchors(params: MlpParams, client_ds: LabeledDataset, client_id: int = 0) -> LocalAnchorReport:
    if len(client_ds) == 0:
        raise ContractError(f"client {client_id} has no data to compute anchors from")
    if client_ds.num_classes != params.num_classes:
        raise DimensionError(f"dataset has {client_ds.num_classes} categories, model outputs {params.num_classes}")
    feats = features_of(params, client_ds.inputs)
    means, counts = class_means(feats, client_ds.labels, client_ds.num_classes)
    return LocalAnchorReport(client_id, means, counts, counts > 0)


def _stack(reports: Sequence[LocalAnchorReport]):
    if not reports:
        raise ContractError("no anchor reports to aggregate")
    shape = reports[0].anchors.shape
    for r in reports:
        if r.anchors.shape != shape:
            raise DimensionError(f"client {r.client_id} anchors {r.anchors.shape} != {shape}")
    return shape


def _fill_missing(out: np.ndarray, present: np.ndarray, previous: AnchorSet | None):
    """Categories nobody holds inherit the previous global anchor when there is one."""
    if previous is None:
        return
    if previous.anchors.shape != out.shape:
        raise DimensionError(f"previous anchors {previous.anchors.shape} != {out.shape}")
    inherit = ~present & previous.present
    out[inherit] = previous.anchors[inherit]
    present |= inherit


def aggregate_weighted(
    reports: Sequence[LocalAnchorReport], previous: AnchorSet | None = None, round_tag: int = -1
) -> AnchorSet:
    """Sample-count weighted mean of local anchors, category by category."""
    C, d = _stack(reports)
    sums = np.zeros((C, d))
    totals = np.zeros(C, dtype=np.int64)
    for r in sorted(reports, key=lambda r: r.client_id):
        p = r.presence
        sums[p] += r.counts[p, None] * r.anchors[p]
        totals += r.counts
    present = totals > 0
    out = np.zeros((C, d))
    out[present] = sums[present] / totals[present, None]
    _fill_missing(out, present, previous)
    return AnchorSet(out, present, round_tag)


def aggregate_uniform(
    reports: Sequence[LocalAnchorReport], previous: AnchorSet | None, round_tag: int = -1
) -> AnchorSet:
    """Plain mean over clients, ignoring sample counts.

    A client lacking a category contributes the previous global anchor for
    it; without a previous anchor only the clients holding the category
    are averaged.
    """
    C, d = _stack(reports)
    if previous is not None and previous.anchors.shape != (C, d):
        raise DimensionError(f"previous anchors {previous.anchors.shape} != {(C, d)}")
    sums = np.zeros((C, d))
    n_terms = np.zeros(C, dtype=np.int64)
    n_local = np.zeros(C, dtype=np.int64)
    for r in sorted(reports, key=lambda r: r.client_id):
        p = r.presence
        sums[p] += r.anchors[p]
        n_terms[p] += 1
        n_local[p] += 1
        if previous is not None:
            sub = ~p & previous.present
            sums[sub] += previous.anchors[sub]
            n_terms[sub] += 1
    present = n_local > 0
    out = np.zeros((C, d))
    out[present] = sums[present] / n_terms[present, None]
    _fill_missing(out, present, previous)
    return AnchorSet(out, present, round_tag)


def direct_global_anchors(params: MlpParams, all_data: Sequence[LabeledDataset]) -> AnchorSet:
    """Per-category mean of normalized features over the pooled data."""
    if not all_data:
        raise ContractError("no datasets given")
    C = all_data[0].num_classes
    inputs = np.concatenate([ds.inputs for ds in all_data])
    labels = np.concatenate([ds.labels for ds in all_data])
    means, counts = class_means(features_of(params, inputs), labels, C)
    return AnchorSet(means, counts > 0)


def renormalize(anchors: AnchorSet) -> AnchorSet:
    out = anchors.copy()
    out.anchors[out.present] = normalize_features(out.anchors[out.present])
    return out


def anchor_displacement(new: AnchorSet, old: AnchorSet | None) -> float:
    """Mean Euclidean shift over categories defined in both sets (NaN if none)."""
    if old is None:
        return float("nan")
    both = new.present & old.present
    if not both.any():
        return float("nan")
    return float(np.mean(np.linalg.norm(new.anchors[both] - old.anchors[both], axis=1)))
