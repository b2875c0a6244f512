"""Task loss and the two anchor-matching losses.

Every loss returns its mean value over the batch together with the
gradient with respect to its input matrix. Anchors are constants: no
gradient flows into them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

NORM_EPS = 1e-12
VARIANTS = ("none", "l2", "cg")


@dataclass
class AnchorSet:
    """One anchor row per category; rows with ``present`` False are undefined."""

    anchors: np.ndarray
    present: np.ndarray
    round_tag: int = -1

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        if self.anchors.ndim != 2 or self.present.shape != (self.anchors.shape[0],):
            raise DimensionError(f"anchors {self.anchors.shape} and presence {self.present.shape} disagree")
        if not np.all(np.isfinite(self.anchors[self.present])):
            raise ContractError("defined anchors must be finite")
        # sentinel rows are pinned to zero so they can never leak a value
        self.anchors[~self.present] = 0.0

    @classmethod
    def empty(cls, C: int, d: int, round_tag: int = -1) -> "AnchorSet":
        return cls(np.zeros((C, d)), np.zeros(C, dtype=bool), round_tag)

    @property
    def num_classes(self) -> int:
        return int(self.anchors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.anchors.shape[1])

    def copy(self) -> "AnchorSet":
        return AnchorSet(self.anchors.copy(), self.present.copy(), self.round_tag)


@dataclass
class LossBreakdown:
    task_loss: float
    match_loss: float
    total: float
    lam: float


def _check_labels(n: int, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"{n} rows but labels of shape {labels.shape}")
    return labels


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy; gradient is ``(softmax - onehot) / n``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    n, C = logits.shape
    labels = _check_labels(n, labels)
    if n and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"labels must lie in [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


def normalize_features(features: np.ndarray) -> np.ndarray:
    """Scale each row to unit L2 norm; rows with norm below 1e-12 pass through."""
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    safe = norms >= NORM_EPS
    return np.where(safe, features / np.where(safe, norms, 1.0), features)


def normalize_backward(features: np.ndarray, d_normalized: np.ndarray) -> np.ndarray:
    """Pull a gradient back through ``x -> x / |x|``.

    The Jacobian is ``(I - u u^T) / |x|`` with ``u = x / |x|``; rows left
    unchanged by the forward guard get the identity.
    """
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    safe = norms >= NORM_EPS
    u = features / np.where(safe, norms, 1.0)
    proj = (d_normalized - u * np.sum(u * d_normalized, axis=1, keepdims=True)) / np.where(safe, norms, 1.0)
    return np.where(safe, proj, d_normalized)


def _check_anchor_dim(features, anchors: AnchorSet):
    if features.ndim != 2 or features.shape[1] != anchors.dim:
        raise DimensionError(f"features {features.shape} do not match anchor dim {anchors.dim}")


def l2_match_loss(features: np.ndarray, labels, anchors: AnchorSet) -> tuple[float, np.ndarray]:
    """Mean squared distance from each feature to its category's anchor.

    Samples whose anchor is undefined add nothing to the sum but still
    count in the batch size.
    """
    _check_anchor_dim(features, anchors)
    n = features.shape[0]
    labels = _check_labels(n, labels)
    if n == 0:
        return 0.0, np.zeros_like(features)
    active = anchors.present[labels]
    diff = np.where(active[:, None], features - anchors.anchors[labels], 0.0)
    loss = float(np.sum(diff**2) / n)
    return loss, 2.0 * diff / n


def cg_loss(features: np.ndarray, labels, anchors: AnchorSet, alpha: float) -> tuple[float, np.ndarray]:
    """Contrastive-guiding loss.

    Similarity logits are ``<a_i, f> / alpha`` over the defined anchors; the
    loss is their softmax cross-entropy against the sample's category.
    Undefined anchors are left out of the softmax, and a sample whose own
    anchor is undefined contributes zero.
    """
    if not alpha > 0:
        raise ConfigError(f"temperature alpha must be positive, got {alpha}")
    _check_anchor_dim(features, anchors)
    n = features.shape[0]
    labels = _check_labels(n, labels)
    grad = np.zeros_like(features)
    if n == 0:
        return 0.0, grad
    cols = np.flatnonzero(anchors.present)
    active = anchors.present[labels]
    if cols.size == 0 or not active.any():
        return 0.0, grad

    A = anchors.anchors[cols]
    f = features[active]
    target = np.searchsorted(cols, labels[active])
    logits = f @ A.T / alpha
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(f.shape[0])
    loss = float(np.sum(log_z - shifted[rows, target]) / n)
    d_logits = np.exp(shifted - log_z[:, None])
    d_logits[rows, target] -= 1.0
    grad[active] = d_logits @ A / (alpha * n)
    return loss, grad


def combined_local_loss(
    cache,
    labels,
    anchors: AnchorSet | None,
    lam: float,
    variant: str,
    alpha: float = 1.0,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Task loss plus ``lam`` times the matching loss on normalized features.

    Returns the breakdown and the two gradient streams consumed by
    ``mlp_backward``: one at the logits, one at the raw (unnormalized)
    feature layer.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown matching variant {variant!r}; expected one of {VARIANTS}")
    if lam < 0:
        raise ConfigError(f"lambda must be nonnegative, got {lam}")
    task, d_logits = cross_entropy(cache.logits, labels)
    if variant == "none" or lam == 0:
        # exact zeros keep this path bitwise identical to plain training
        return LossBreakdown(task, 0.0, task, lam if variant != "none" else 0.0), d_logits, np.zeros_like(cache.feature)
    if anchors is None:
        raise ContractError(f"variant {variant!r} needs anchors")

    normed = normalize_features(cache.feature)
    if variant == "l2":
        match, d_normed = l2_match_loss(normed, labels, anchors)
    else:
        match, d_normed = cg_loss(normed, labels, anchors, alpha)
    d_feature = normalize_backward(cache.feature, lam * d_normed)
    return LossBreakdown(task, match, task + lam * match, lam), d_logits, d_feature
