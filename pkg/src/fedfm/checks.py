"""Small-scale verification suite behind ``fedfm check``.

Each check returns a :class:`CheckResult`; names are stable so a failure
can be traced back to a specific property. ``fault`` deliberately corrupts
the named check's analytic side, which lets the suite demonstrate that it
actually detects errors.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import anchors as anc
from .data import LabeledDataset, gen_gaussian_mixture, partition_dirichlet, partition_missing
from .losses import AnchorSet, cg_loss, combined_local_loss, cross_entropy, l2_match_loss, normalize_backward, normalize_features
from .metrics import kmeans, nmi, silhouette
from .nn import MlpParams, init_mlp, mlp_backward, mlp_forward
from .protocol import TRAJECTORY_FIELDS, FedConfig, run_experiment

FD_EPS = 1e-5
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_param_grad(loss: Callable[[MlpParams], float], params: MlpParams, eps: float = FD_EPS) -> list[np.ndarray]:
    """Central finite differences of ``loss`` with respect to every parameter entry."""
    out = []
    probe = params.copy()
    for arr in probe.arrays():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss(probe)
            flat[i] = orig - eps
            down = loss(probe)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        out.append(g)
    return out


def _random_anchors(rng, C, d, missing=()):
    a = rng.standard_normal((C, d))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    present = np.ones(C, dtype=bool)
    present[list(missing)] = False
    return AnchorSet(a, present)


def loss_and_grad(kind: str, params: MlpParams, x, y, anchors: AnchorSet, lam: float = 50.0, alpha: float = 0.5):
    """Scalar loss and its analytic parameter gradient for one of the checked objectives."""
    cache = mlp_forward(params, x)
    zeros_logits = np.zeros_like(cache.logits)
    zeros_feat = np.zeros_like(cache.feature)
    if kind == "cross_entropy":
        value, d_logits = cross_entropy(cache.logits, y)
        grads = mlp_backward(params, cache, d_logits, zeros_feat)
    elif kind in ("l2_match", "cg_loss"):
        normed = normalize_features(cache.feature)
        if kind == "l2_match":
            value, d_n = l2_match_loss(normed, y, anchors)
        else:
            value, d_n = cg_loss(normed, y, anchors, alpha)
        grads = mlp_backward(params, cache, zeros_logits, normalize_backward(cache.feature, d_n))
    elif kind in ("combined_l2", "combined_cg"):
        br, d_logits, d_feat = combined_local_loss(cache, y, anchors, lam, kind.split("_")[1], alpha)
        value = br.total
        grads = mlp_backward(params, cache, d_logits, d_feat)
    else:
        raise ValueError(f"unknown objective {kind!r}")
    return value, grads


def gradient_instance(kind: str, seed: int, fault: bool = False) -> float:
    """Max relative error between analytic and numeric gradients on one random net."""
    rng = np.random.default_rng(seed)
    d_in, C = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    hidden = [int(rng.integers(3, 9)) for _ in range(int(rng.integers(1, 3)))]
    params = init_mlp([d_in, *hidden, C], seed)
    # nonzero biases keep ReLU units away from the kink at typical inputs
    for b in params.biases:
        b += rng.uniform(0.05, 0.3, size=b.shape)
    n = int(rng.integers(3, 8))
    x = rng.standard_normal((n, d_in))
    y = rng.integers(C, size=n)
    missing = [int(rng.integers(C))] if C > 2 and rng.random() < 0.3 else []
    anchors = _random_anchors(rng, C, hidden[-1], missing)
    lam = float(rng.uniform(0.5, 50.0))

    _, grads = loss_and_grad(kind, params, x, y, anchors, lam)
    numeric = numeric_param_grad(lambda p: loss_and_grad(kind, p, x, y, anchors, lam)[0], params)
    analytic = grads.arrays()
    if fault:
        analytic = [a * 1.05 + 1e-3 for a in analytic]
    return max(relative_error(a, b) for a, b in zip(analytic, numeric))


GRAD_KINDS = {
    "grad_check.cross_entropy": "cross_entropy",
    "grad_check.l2_match": "l2_match",
    "grad_check.cg_loss": "cg_loss",
    "grad_check.combined": "combined_cg",
}


def _grad_check(name: str, instances: int, fault: bool) -> CheckResult:
    kinds = [GRAD_KINDS[name]] if name != "grad_check.combined" else ["combined_l2", "combined_cg"]
    worst = 0.0
    for i in range(instances):
        for kind in kinds:
            worst = max(worst, gradient_instance(kind, 1000 + i, fault))
    return CheckResult(name, worst < GRAD_TOL, f"max relative error {worst:.2e} over {instances} nets")


def anchor_equivalence(configs: int = 50, fault: bool = False) -> tuple[float, int]:
    """Largest gap between aggregated local anchors and pooled means over random setups."""
    worst = 0.0
    for i in range(configs):
        rng = np.random.default_rng(5000 + i)
        C = int(rng.integers(2, 6))
        d_in = int(rng.integers(2, 6))
        K = int(rng.integers(1, 6))
        ds = gen_gaussian_mixture(C, d_in, int(rng.integers(4, 20)), 3.0, 5000 + i)
        max_missing = C - math.ceil(C / K)
        if max_missing >= 1 and i % 2 == 0:
            split = partition_missing(ds, K, int(rng.integers(1, max_missing + 1)), i)
        else:
            split = partition_dirichlet(ds, K, float(rng.uniform(0.1, 2.0)), i)
        params = init_mlp([d_in, int(rng.integers(2, 8)), C], i)
        clients = [c for c in split.clients if len(c)]
        reports = [anc.local_anchors(params, c, k) for k, c in enumerate(clients)]
        agg = anc.aggregate_weighted(reports)
        direct = anc.direct_global_anchors(params, clients)
        if fault:
            agg.anchors[agg.present] += 1e-6
        if not np.array_equal(agg.present, direct.present):
            return math.inf, i
        worst = max(worst, float(np.max(np.abs(agg.anchors - direct.anchors))))
    return worst, configs


def _small_config(base: FedConfig, **kw) -> FedConfig:
    small = dict(T=6, T_s=2, tau_epochs=1, hidden_dims=(16, 8), workers=1)
    small.update(kw)
    return replace(base, **small)


def _small_data(K: int, seed: int = 0):
    ds = gen_gaussian_mixture(4, 6, 30, 3.0, seed)
    return partition_dirichlet(ds, K, 0.5, seed)


def _trajectory(records):
    return [tuple(repr(getattr(r, f)) for f in TRAJECTORY_FIELDS) for r in records]


def run_checks(base: FedConfig | None = None, fault: str | None = None, grad_instances: int = 20) -> list[CheckResult]:
    base = base or FedConfig()
    K = min(base.K, 4)
    results = []

    def timed(name, fn):
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(name, False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)

    for name in GRAD_KINDS:
        timed(name, lambda name=name: _grad_check(name, grad_instances, fault == name))

    def equiv():
        worst, n = anchor_equivalence(fault=fault == "anchor_equivalence")
        return CheckResult("anchor_equivalence", worst <= 1e-12, f"max abs gap {worst:.2e} over {n} setups")

    timed("anchor_equivalence", equiv)

    def lemma2():
        cfg = _small_config(base, algorithm="fedfm_l2", K=K, aggregation="weighted", renormalize_anchors=False, check_lemma2=False)
        recs = run_experiment(cfg, _small_data(K)).records
        gaps = [r.lemma2_after - r.lemma2_before for r in recs if not math.isnan(r.lemma2_before)]
        if fault == "lemma2_monotonicity":
            gaps = [g + 1.0 for g in gaps]
        worst = max(gaps) if gaps else -math.inf
        return CheckResult("lemma2_monotonicity", bool(gaps) and worst <= 1e-9, f"{len(gaps)} anchor updates, max increase {worst:.2e}")

    timed("lemma2_monotonicity", lemma2)

    def degenerate(name, algo, **kw):
        def fn():
            data = _small_data(K)
            ref = run_experiment(_small_config(base, algorithm="fedavg", K=K), data).records
            other = run_experiment(_small_config(base, algorithm=algo, K=K, **kw), data).records
            same = _trajectory(ref) == _trajectory(other)
            if fault == name:
                same = False
            return CheckResult(name, same, "trajectories identical" if same else "trajectories differ")

        return fn

    timed("degeneration.lambda0", degenerate("degeneration.lambda0", "fedfm_cg", lam=0.0))
    timed("degeneration.mu0", degenerate("degeneration.mu0", "fedprox", mu_prox=0.0))

    def ledger():
        data = _small_data(K)
        avg = run_experiment(_small_config(base, algorithm="fedavg", K=K), data)
        fm = run_experiment(_small_config(base, algorithm="fedfm_cg", K=K), data)
        C, d = 4, 8
        fm_rounds = sum(1 for r in fm.records if r.matching)
        expected = avg.ledger.floats + fm_rounds * 2 * K * C * d
        ok = fm.ledger.floats == expected
        for led in (avg.ledger, fm.ledger):
            ok &= led.floats == sum(e.up_floats + e.down_floats for e in led.entries)
        if fault == "ledger_conservation":
            ok = False
        return CheckResult("ledger_conservation", ok, f"fedfm {fm.ledger.floats} vs fedavg {avg.ledger.floats} + anchors")

    timed("ledger_conservation", ledger)

    def metric_oracles():
        rng = np.random.default_rng(7)
        x = rng.standard_normal((50, 3))
        lab = rng.integers(3, size=50)
        gap = abs(silhouette(x, lab) - brute_force_silhouette(x, lab))
        hand = nmi([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0 and nmi([0, 1, 0, 1], [0, 0, 1, 1]) == 0.0
        sse = kmeans(x, 3, seed=0).sse_history
        mono = all(b <= a + 1e-12 for a, b in zip(sse, sse[1:]))
        ok = gap <= 1e-12 and hand and mono and fault != "metric_oracles"
        return CheckResult("metric_oracles", ok, f"silhouette gap {gap:.1e}, nmi hand cases {hand}, sse monotone {mono}")

    timed("metric_oracles", metric_oracles)
    return results


CHECK_NAMES = (
    *GRAD_KINDS,
    "anchor_equivalence",
    "lemma2_monotonicity",
    "degeneration.lambda0",
    "degeneration.mu0",
    "ledger_conservation",
    "metric_oracles",
)


def brute_force_silhouette(x, labels) -> float:
    """Textbook O(n^2) silhouette with explicit loops (reference implementation)."""
    x = np.asarray(x, dtype=np.float64)
    labels = list(labels)
    n = len(labels)
    total = 0.0
    for i in range(n):
        by_cluster: dict = {}
        for j in range(n):
            if i == j:
                continue
            dist = math.sqrt(sum((x[i, k] - x[j, k]) ** 2 for k in range(x.shape[1])))
            by_cluster.setdefault(labels[j], []).append(dist)
        own = by_cluster.get(labels[i], [])
        if not own:
            continue
        a = sum(own) / len(own)
        b = min(sum(v) / len(v) for c, v in by_cluster.items() if c != labels[i])
        if max(a, b) > 0:
            total += (b - a) / max(a, b)
    return total / n
