"""Round-level federated engine: FedAvg, FedProx, FedFM (L2 / CG) and FedFM-Lite.

A run is a sequence of pure round functions ``(state, cfg) -> (state, record)``.
Every client holds a training part and a validation part of its data;
anchors and the objective monitor only ever look at the training part.

Randomness for client ``k``'s epoch ``e`` in round ``t`` comes from the seed
tuple ``(seed, k, t, e)``, so results do not depend on the order in which
clients are trained.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import anchors as anc
from .data import ClientSplit, LabeledDataset, holdout_split
from .errors import ConfigError, InvariantViolation, ProtocolError
from .losses import AnchorSet, LossBreakdown, combined_local_loss
from .metrics import accuracy, lemma2_monitor
from .nn import MlpParams, init_mlp, mlp_backward, mlp_forward, param_count, param_distance, sgd_step, weighted_param_sum

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedprox", "fedfm_l2", "fedfm_cg", "fedfm_lite")
AGGREGATIONS = ("weighted", "uniform")
LEMMA2_SLACK = 1e-9


@dataclass
class FedConfig:
    algorithm: str = "fedfm_cg"
    K: int = 10
    T: int = 40
    tau_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lam: float = 50.0
    alpha: float = 1.0
    T_s: int = 8
    mu_prox: float = 0.0
    lite_model_period: int = 1
    lite_variant: str = "cg"
    aggregation: str = "weighted"
    renormalize_anchors: bool = False
    hidden_dims: tuple[int, ...] = (64, 32)
    val_frac: float = 0.2
    seed: int = 0
    check_lemma2: bool = True
    workers: int = 1

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.lite_variant not in ("l2", "cg"):
            raise ConfigError(f"lite_variant must be 'l2' or 'cg', got {self.lite_variant!r}")
        for name in ("K", "tau_epochs", "batch_size", "lite_model_period", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.T < 0 or self.T_s < 0:
            raise ConfigError("T and T_s must be nonnegative")
        if self.T > 0 and not self.T_s < self.T:
            raise ConfigError(f"T_s={self.T_s} must be smaller than T={self.T}")
        if not self.lr > 0 or not self.alpha > 0:
            raise ConfigError("lr and alpha must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.lam < 0 or self.mu_prox < 0:
            raise ConfigError("weight_decay, lam and mu_prox must be nonnegative")
        if not 0 <= self.val_frac < 1:
            raise ConfigError(f"val_frac must lie in [0, 1), got {self.val_frac}")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden layer widths must be positive")

    @property
    def variant(self) -> str:
        """Matching loss used once matching is switched on."""
        return {"fedfm_l2": "l2", "fedfm_cg": "cg", "fedfm_lite": self.lite_variant}.get(self.algorithm, "none")

    @property
    def uses_anchors(self) -> bool:
        return self.variant != "none"


@dataclass
class LedgerEntry:
    round: int
    handshakes: int
    up_floats: int
    down_floats: int
    up_ints: int
    model_up_floats: int
    model_down_floats: int
    anchor_up_floats: int
    anchor_down_floats: int
    model_round: bool


@dataclass
class CommLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    def add(self, entry: LedgerEntry):
        self.entries.append(entry)

    def total(self, name: str) -> int:
        return int(sum(getattr(e, name) for e in self.entries))

    @property
    def handshakes(self) -> int:
        return self.total("handshakes")

    @property
    def floats(self) -> int:
        return self.total("up_floats") + self.total("down_floats")

    @property
    def model_rounds(self) -> int:
        return sum(e.model_round for e in self.entries)


@dataclass
class RoundRecord:
    round: int
    algorithm: str
    model_round: bool
    matching: bool
    task_loss: float
    match_loss: float
    total_loss: float
    val_accuracy: float
    test_accuracy: float
    best_val_accuracy: float
    best_test_accuracy: float
    lemma2_before: float
    lemma2_after: float
    anchor_displacement: float
    param_displacement: float
    grad_norm_est: float
    model_digest: str

    def as_dict(self) -> dict:
        return asdict(self)


# Fields that describe the training trajectory itself, as opposed to
# anchor diagnostics that only matching algorithms produce.
TRAJECTORY_FIELDS = tuple(
    f.name
    for f in fields(RoundRecord)
    if f.name not in ("algorithm", "matching", "lemma2_before", "lemma2_after", "anchor_displacement")
)


@dataclass
class FedState:
    round: int
    global_params: MlpParams
    train: list[LabeledDataset]
    val: list[LabeledDataset]
    test: LabeledDataset | None
    anchors: AnchorSet | None = None
    local_params: list[MlpParams] | None = None
    ledger: CommLedger = field(default_factory=CommLedger)
    best_val: float = -math.inf
    best_test: float = float("nan")
    best_params: MlpParams | None = None

    @property
    def num_classes(self) -> int:
        return self.global_params.num_classes

    def client_weights(self) -> np.ndarray:
        sizes = np.array([len(d) for d in self.train], dtype=np.float64)
        return sizes / sizes.sum()

    def train_split(self) -> ClientSplit:
        counts = np.stack([d.class_counts() for d in self.train])
        idx = [np.arange(len(d)) for d in self.train]
        return ClientSplit(list(self.train), idx, counts, np.array([], np.int64))


def model_digest(params: MlpParams) -> str:
    h = hashlib.sha256()
    for a in params.arrays():
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def local_train(
    client_ds: LabeledDataset,
    init_params: MlpParams,
    anchors: AnchorSet | None,
    cfg: FedConfig,
    round: int,
    client_id: int = 0,
    global_params: MlpParams | None = None,
    matching: bool | None = None,
) -> tuple[MlpParams, LossBreakdown, int]:
    """``tau_epochs`` passes of mini-batch SGD over one client's data.

    Returns the trained parameters, the loss breakdown averaged over steps
    and the number of steps taken. Matching is on by default when the
    algorithm uses anchors and ``round >= T_s``. FedProx adds
    ``mu/2 |w - w_global|^2`` with ``w_global`` defaulting to ``init_params``.
    """
    if matching is None:
        matching = cfg.uses_anchors and round >= cfg.T_s
    if matching and anchors is None:
        raise ProtocolError(f"client {client_id}, round {round}: matching is on but no anchors were received")
    variant = cfg.variant if matching else "none"
    prox_center = global_params if global_params is not None else init_params
    use_prox = cfg.algorithm == "fedprox" and cfg.mu_prox > 0

    params = init_params
    velocity = params.zeros_like()
    n = len(client_ds)
    sums = np.zeros(3)
    steps = 0
    for epoch in range(cfg.tau_epochs):
        rng = np.random.default_rng([cfg.seed, client_id, round, epoch])
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = client_ds.inputs[idx], client_ds.labels[idx]
            cache = mlp_forward(params, x)
            br, d_logits, d_feat = combined_local_loss(cache, y, anchors, cfg.lam, variant, cfg.alpha)
            grads = mlp_backward(params, cache, d_logits, d_feat)
            if use_prox:
                for g, p, c in zip(grads.arrays(), params.arrays(), prox_center.arrays()):
                    g += cfg.mu_prox * (p - c)
            params, velocity = sgd_step(params, grads, velocity, cfg.lr, cfg.momentum, cfg.weight_decay)
            sums += (br.task_loss, br.match_loss, br.total)
            steps += 1
    if steps == 0:
        return params, LossBreakdown(0.0, 0.0, 0.0, cfg.lam), 0
    task, match, total = sums / steps
    return params, LossBreakdown(float(task), float(match), float(total), cfg.lam if matching else 0.0), steps


def _train_all(state: FedState, cfg: FedConfig, starts: Sequence[MlpParams], anchors, matching: bool):
    def job(k):
        return local_train(state.train[k], starts[k], anchors, cfg, state.round, k, matching=matching)

    ks = range(len(state.train))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(job, ks))
    return [job(k) for k in ks]


def _aggregation_weights(state: FedState) -> np.ndarray:
    p = state.client_weights()
    if abs(p.sum() - 1.0) > 1e-9:
        raise InvariantViolation(f"aggregation weights sum to {p.sum()!r}")
    return p


def _aggregate_anchors(state: FedState, cfg: FedConfig, reports) -> AnchorSet:
    if cfg.aggregation == "weighted":
        out = anc.aggregate_weighted(reports, previous=state.anchors, round_tag=state.round)
    else:
        out = anc.aggregate_uniform(reports, state.anchors, round_tag=state.round)
    if cfg.renormalize_anchors:
        out = anc.renormalize(out)
    return out


def _mean_breakdown(results, p: np.ndarray) -> tuple[float, float, float]:
    b = np.array([[r[1].task_loss, r[1].match_loss, r[1].total] for r in results])
    return tuple(float(v) for v in p @ b)


def _evaluate(state: FedState, params: MlpParams) -> tuple[float, float]:
    accs = [accuracy(params, v) for v in state.val if len(v)]
    val = float(np.mean(accs)) if accs else float("nan")
    test = accuracy(params, state.test) if state.test is not None and len(state.test) else float("nan")
    return val, test


def _finish(
    state: FedState,
    cfg: FedConfig,
    new_global: MlpParams,
    results,
    matching: bool,
    model_round: bool,
    lemma2=(math.nan, math.nan),
    displacement=math.nan,
    **updates,
) -> tuple[FedState, RoundRecord]:
    p = state.client_weights()
    task, match, total = _mean_breakdown(results, p)
    val, test = _evaluate(state, new_global)
    best_val, best_test, best_params = state.best_val, state.best_test, state.best_params
    if best_params is None or val > best_val:
        best_val, best_test, best_params = val, test, new_global
    shift = param_distance(new_global, state.global_params)
    tau = float(np.mean([r[2] for r in results])) if results else 0.0
    grad_est = shift / (cfg.lr * tau) if tau > 0 else math.nan
    record = RoundRecord(
        round=state.round,
        algorithm=cfg.algorithm,
        model_round=model_round,
        matching=matching,
        task_loss=task,
        match_loss=match,
        total_loss=total,
        val_accuracy=val,
        test_accuracy=test,
        best_val_accuracy=best_val,
        best_test_accuracy=best_test,
        lemma2_before=lemma2[0],
        lemma2_after=lemma2[1],
        anchor_displacement=displacement,
        param_displacement=shift,
        grad_norm_est=grad_est,
        model_digest=model_digest(new_global),
    )
    new_state = replace(
        state,
        round=state.round + 1,
        global_params=new_global,
        best_val=best_val,
        best_test=best_test,
        best_params=best_params,
        **updates,
    )
    return new_state, record


def run_round_fedavg(state: FedState, cfg: FedConfig) -> tuple[FedState, RoundRecord]:
    """Broadcast, plain local training, size-weighted model averaging (FedProx adds its proximal term)."""
    K = len(state.train)
    P = param_count(state.global_params)
    starts = [state.global_params] * K
    results = _train_all(state, cfg, starts, None, matching=False)
    new_global = weighted_param_sum([r[0] for r in results], _aggregation_weights(state))
    state.ledger.add(LedgerEntry(state.round, 1, K * P, K * P, 0, K * P, K * P, 0, 0, True))
    return _finish(state, cfg, new_global, results, matching=False, model_round=True)


def run_round_fedfm(state: FedState, cfg: FedConfig) -> tuple[FedState, RoundRecord]:
    """Two-handshake FedFM round.

    Local anchors come from the current global model, are aggregated and
    broadcast, and only then does local training start.
    """
    if state.round < cfg.T_s:
        raise ProtocolError(f"round {state.round} precedes the matching launch round T_s={cfg.T_s}")
    K, C = len(state.train), state.num_classes
    d = state.global_params.feature_dim
    P = param_count(state.global_params)

    reports = [anc.local_anchors(state.global_params, ds, k) for k, ds in enumerate(state.train)]
    new_anchors = _aggregate_anchors(state, cfg, reports)

    lemma2 = (math.nan, math.nan)
    if cfg.variant == "l2" and state.anchors is not None:
        lemma2 = lemma2_monitor(state.global_params, state.anchors, new_anchors, state.train_split(), cfg.lam)
        exact = cfg.aggregation == "weighted" and not cfg.renormalize_anchors
        if cfg.check_lemma2 and exact and lemma2[1] > lemma2[0] + LEMMA2_SLACK:
            raise InvariantViolation(
                f"round {state.round}: anchor update raised the objective {lemma2[0]!r} -> {lemma2[1]!r}"
            )
    displacement = anc.anchor_displacement(new_anchors, state.anchors)

    results = _train_all(state, cfg, [state.global_params] * K, new_anchors, matching=True)
    new_global = weighted_param_sum([r[0] for r in results], _aggregation_weights(state))

    counts = K * C if cfg.aggregation == "weighted" else 0
    state.ledger.add(
        LedgerEntry(state.round, 2, K * (P + C * d), K * (P + C * d), counts, K * P, K * P, K * C * d, K * C * d, True)
    )
    return _finish(
        state, cfg, new_global, results, True, True, lemma2, displacement, anchors=new_anchors
    )


def is_model_round(round: int, period: int) -> bool:
    """FedFM-Lite exchanges models on every ``period``-th round (1-based)."""
    return (round + 1) % period == 0


def run_round_fedfm_lite(state: FedState, cfg: FedConfig) -> tuple[FedState, RoundRecord]:
    """Single-handshake round.

    Clients train with the anchors received last round, then compute local
    anchors on their post-training models and upload them together with the
    model (on model rounds only). Between model rounds each client keeps
    training its own model.
    """
    K, C = len(state.train), state.num_classes
    d = state.global_params.feature_dim
    P = param_count(state.global_params)
    starts = state.local_params or [state.global_params] * K
    matching = state.round >= cfg.T_s and state.anchors is not None
    if state.round >= cfg.T_s and state.anchors is None:
        log.warning("round %d: no anchors yet, training without matching", state.round)

    results = _train_all(state, cfg, starts, state.anchors if matching else None, matching=matching)
    trained = [r[0] for r in results]
    reports = [anc.local_anchors(w, ds, k) for k, (w, ds) in enumerate(zip(trained, state.train))]
    new_anchors = _aggregate_anchors(state, cfg, reports)
    displacement = anc.anchor_displacement(new_anchors, state.anchors)

    model_round = is_model_round(state.round, cfg.lite_model_period)
    if model_round:
        new_global = weighted_param_sum(trained, _aggregation_weights(state))
        local = None
    else:
        new_global = state.global_params
        local = trained
    model_floats = K * P if model_round else 0
    counts = K * C if cfg.aggregation == "weighted" else 0
    state.ledger.add(
        LedgerEntry(
            state.round, 1, model_floats + K * C * d, model_floats + K * C * d, counts,
            model_floats, model_floats, K * C * d, K * C * d, model_round,
        )
    )
    return _finish(
        state, cfg, new_global, results, matching, model_round,
        displacement=displacement, anchors=new_anchors, local_params=local,
    )


def run_round(state: FedState, cfg: FedConfig) -> tuple[FedState, RoundRecord]:
    if cfg.algorithm == "fedfm_lite":
        return run_round_fedfm_lite(state, cfg)
    if cfg.algorithm in ("fedfm_l2", "fedfm_cg") and state.round >= cfg.T_s:
        return run_round_fedfm(state, cfg)
    return run_round_fedavg(state, cfg)


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    ledger: CommLedger
    params: MlpParams
    final_params: MlpParams
    state: FedState

    @property
    def best_test_accuracy(self) -> float:
        return self.records[-1].best_test_accuracy if self.records else float("nan")


def init_state(cfg: FedConfig, data: ClientSplit, test: LabeledDataset | None = None) -> FedState:
    if data.num_clients != cfg.K:
        raise ConfigError(f"config says K={cfg.K} but the split has {data.num_clients} clients")
    train, val = [], []
    for k, ds in enumerate(data.clients):
        if cfg.val_frac > 0 and len(ds) > 1:
            kept, held = holdout_split(ds, cfg.val_frac, seed=cfg.seed * 1_000_003 + k, strict=False)
        else:
            kept, held = ds, ds.subset([])
        if len(kept) == 0:
            kept, held = ds, ds.subset([])
        train.append(kept)
        val.append(held)
    C = data.clients[0].num_classes
    dims = [data.clients[0].input_dim, *cfg.hidden_dims, C]
    return FedState(0, init_mlp(dims, cfg.seed), train, val, test)


def run_experiment(cfg: FedConfig, data: ClientSplit, test: LabeledDataset | None = None) -> ExperimentResult:
    """Run ``cfg.T`` rounds and keep the model with the best mean client-validation accuracy."""
    state = init_state(cfg, data, test)
    initial = state.global_params
    records = []
    for _ in range(cfg.T):
        state, record = run_round(state, cfg)
        records.append(record)
        log.debug("round %d val=%.4f test=%.4f", record.round, record.val_accuracy, record.test_accuracy)
    best = state.best_params if state.best_params is not None else initial
    return ExperimentResult(records, state.ledger, best, state.global_params, state)
