"""Small fully-connected classifier with a hand-written backward pass.

Parameters are plain float64 numpy arrays. A network with ``layer_dims``
``[d_in, h_1, ..., h_L, C]`` has ReLU on every hidden layer; the feature
vector is the activation of the last hidden layer (the raw input when
there are no hidden layers), and the final layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError


@dataclass
class MlpParams:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise DimensionError(
                f"{len(self.layer_dims)} layer dims need {len(self.layer_dims) - 1} weight/bias pairs, "
                f"got {len(self.weights)}/{len(self.biases)}"
            )
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[l], self.layer_dims[l + 1])
            if w.shape != expected:
                raise DimensionError(f"layer {l}: weight shape {w.shape}, expected {expected}")
            if b.shape != (expected[1],):
                raise DimensionError(f"layer {l}: bias shape {b.shape}, expected {(expected[1],)}")

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-2]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved, layer by layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_dims), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_dims),
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
        )


# Gradients and momentum buffers share the parameter layout.
ParamGrads = MlpParams


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)
    feature: np.ndarray | None = None
    logits: np.ndarray | None = None


def init_mlp(layer_dims: Sequence[int], seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ContractError(f"layer_dims must hold at least two positive sizes, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(dims, weights, biases)


def _relu(x):
    return np.maximum(x, 0.0)


def mlp_forward(params: MlpParams, batch: np.ndarray) -> ForwardCache:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise DimensionError(f"batch must be 2-D, got shape {batch.shape}")
    cache = ForwardCache(inputs=batch)
    h = batch
    last = params.num_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        if h.shape[1] != w.shape[0]:
            raise DimensionError(f"layer {l}: input width {h.shape[1]} does not match weight rows {w.shape[0]}")
        z = h @ w + b
        cache.pre_activations.append(z)
        if l == last:
            cache.feature = h
            cache.logits = z
        else:
            h = _relu(z)
            cache.activations.append(h)
    return cache


def mlp_backward(
    params: MlpParams, cache: ForwardCache, d_logits: np.ndarray, d_feature: np.ndarray
) -> ParamGrads:
    """Gradients of a scalar whose sensitivities to logits and features are given.

    ``d_feature`` is injected at the last hidden activation, alongside the
    signal flowing back from the output layer.
    """
    if d_logits.shape != cache.logits.shape:
        raise DimensionError(f"d_logits shape {d_logits.shape} != logits shape {cache.logits.shape}")
    if d_feature.shape != cache.feature.shape:
        raise DimensionError(f"d_feature shape {d_feature.shape} != feature shape {cache.feature.shape}")

    n_layers = params.num_layers
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    delta = d_logits
    for l in range(n_layers - 1, -1, -1):
        layer_in = cache.inputs if l == 0 else cache.activations[l - 1]
        grads_w[l] = layer_in.T @ delta
        grads_b[l] = delta.sum(axis=0)
        if l == 0:
            break
        d_act = delta @ params.weights[l].T
        if l == n_layers - 1:
            d_act = d_act + d_feature
        delta = d_act * (cache.pre_activations[l - 1] > 0.0)
    return ParamGrads(list(params.layer_dims), grads_w, grads_b)


def sgd_step(
    params: MlpParams,
    grads: ParamGrads,
    momentum_state: ParamGrads,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[MlpParams, ParamGrads]:
    """One SGD step with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + (g + weight_decay * p)`` then ``p <- p - lr * v``.
    Inputs are not modified.
    """
    if not lr > 0:
        raise ContractError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
    if not weight_decay >= 0:
        raise ContractError(f"weight_decay must be nonnegative, got {weight_decay}")

    new_w, new_b, buf_w, buf_b = [], [], [], []
    for l in range(params.num_layers):
        for p, g, v, p_out, v_out in (
            (params.weights[l], grads.weights[l], momentum_state.weights[l], new_w, buf_w),
            (params.biases[l], grads.biases[l], momentum_state.biases[l], new_b, buf_b),
        ):
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in layer {l}")
            d = g + weight_decay * p if weight_decay else g
            v_next = momentum * v + d
            v_out.append(v_next)
            p_out.append(p - lr * v_next)
    return (
        MlpParams(list(params.layer_dims), new_w, new_b),
        ParamGrads(list(params.layer_dims), buf_w, buf_b),
    )


def _check_congruent(a: MlpParams, b: MlpParams):
    if a.layer_dims != b.layer_dims:
        raise DimensionError(f"incongruent parameter shapes {a.layer_dims} vs {b.layer_dims}")


def weighted_param_sum(params_list: Sequence[MlpParams], weights: Sequence[float]) -> MlpParams:
    if len(params_list) == 0:
        raise ContractError("need at least one parameter set")
    if len(params_list) != len(weights):
        raise ContractError(f"{len(params_list)} parameter sets but {len(weights)} weights")
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ContractError("aggregation weights must be nonnegative")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ContractError(f"aggregation weights sum to {weights.sum()!r}, not 1")
    ref = params_list[0]
    for p in params_list[1:]:
        _check_congruent(ref, p)

    out_w = [np.zeros_like(w) for w in ref.weights]
    out_b = [np.zeros_like(b) for b in ref.biases]
    # fixed client order keeps the reduction reproducible
    for p, c in zip(params_list, weights):
        for l in range(ref.num_layers):
            out_w[l] += c * p.weights[l]
            out_b[l] += c * p.biases[l]
    return MlpParams(list(ref.layer_dims), out_w, out_b)


def param_count(params: MlpParams) -> int:
    return sum(a.size for a in params.arrays())


def param_distance(a: MlpParams, b: MlpParams) -> float:
    _check_congruent(a, b)
    return float(np.sqrt(sum(np.sum((x - y) ** 2) for x, y in zip(a.arrays(), b.arrays()))))
