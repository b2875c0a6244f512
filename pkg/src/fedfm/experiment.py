"""Experiment files: schema, validation, dataset construction and result output.

An experiment file is YAML with four top-level sections::

    federation:   # FedConfig fields; lam, alpha, T_s, lite_model_period are required
    model:        # hidden_dims
    data:         # source (synthetic | csv), partition, test_frac
    output:       # dir

Unknown keys are rejected with their dotted path.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .data import (
    ClientSplit,
    LabeledDataset,
    gen_gaussian_mixture,
    holdout_split,
    load_csv_dataset,
    partition_dirichlet,
    partition_dominant,
    partition_missing,
)
from .errors import ConfigError, FedFMError
from .metrics import FeatureDump, feature_dump, feature_quality
from .protocol import ExperimentResult, FedConfig, LedgerEntry, RoundRecord, run_experiment

OUTPUT_ROOT_ENV = "FEDFM_OUTPUT_ROOT"


class _Required:
    """Marker for keys without a default; survives ``copy.deepcopy``."""

    def __deepcopy__(self, memo):
        return self

    def __repr__(self):
        return "<required>"


REQUIRED = _Required()

# Desk-scale defaults: ten clients, matching launched a fifth of the way in.
DEFAULTS: dict[str, Any] = {
    "federation": {
        "algorithm": "fedfm_cg",
        "K": 10,
        "T": 40,
        "tau_epochs": 2,
        "batch_size": 32,
        "lr": 0.01,
        "momentum": 0.9,
        "weight_decay": 1e-5,
        "lam": REQUIRED,
        "alpha": REQUIRED,
        "T_s": REQUIRED,
        "lite_model_period": REQUIRED,
        "lite_variant": "cg",
        "mu_prox": 0.0,
        "aggregation": "weighted",
        "renormalize_anchors": False,
        "val_frac": 0.2,
        "seed": 0,
        "check_lemma2": True,
        "workers": 1,
    },
    "model": {"hidden_dims": [64, 32]},
    "data": {
        "source": "synthetic",
        "test_frac": 0.2,
        "seed": 0,
        "synthetic": {"C": 10, "d_in": 32, "n_per_class": 250, "separation": 6.0, "modes_per_class": 3},
        "csv": {"path": None, "C": None},
        "partition": {"scheme": "dirichlet", "beta": 0.5, "dominant_frac": 0.5, "missing": 1},
    },
    "output": {"dir": "runs/default"},
}

PRESET = {"federation": {"lam": 50.0, "alpha": 1.0, "T_s": 8, "lite_model_period": 1}}

# Setting used for the directional comparisons: ten local epochs and a
# sharper contrastive temperature.
BENCHMARK = {"federation": {"lam": 50.0, "alpha": 0.1, "T_s": 8, "lite_model_period": 1, "tau_epochs": 10}}

CSV_SCHEMA = {
    "rounds.csv": {
        "round": "0-based round index",
        "algorithm": "algorithm name",
        "model_round": "1 if models were exchanged this round",
        "matching": "1 if the anchor-matching loss was active",
        "task_loss": "client-size-weighted mean training cross-entropy over local steps",
        "match_loss": "same average for the matching term (0 when inactive)",
        "total_loss": "task_loss + lam * match_loss, averaged",
        "val_accuracy": "mean of per-client validation accuracies of the global model",
        "test_accuracy": "global model accuracy on the held-out test set",
        "best_val_accuracy": "best val_accuracy so far",
        "best_test_accuracy": "test accuracy of the model with best_val_accuracy",
        "lemma2_before": "objective under the previous anchors (fedfm_l2 only)",
        "lemma2_after": "objective under the freshly aggregated anchors (fedfm_l2 only)",
        "anchor_displacement": "mean L2 shift of global anchors since last round",
        "param_displacement": "L2 norm of the global model change this round",
        "grad_norm_est": "param_displacement / (lr * mean local steps)",
        "model_digest": "sha256 prefix of the global parameters",
    },
    "ledger.csv": {
        "round": "0-based round index",
        "handshakes": "client-server synchronizations this round",
        "up_floats": "floats uploaded by all clients",
        "down_floats": "floats downloaded by all clients",
        "up_ints": "integer category counts uploaded (weighted anchor aggregation)",
        "model_up_floats": "model share of up_floats",
        "model_down_floats": "model share of down_floats",
        "anchor_up_floats": "anchor share of up_floats",
        "anchor_down_floats": "anchor share of down_floats",
        "model_round": "1 if models were exchanged",
    },
    "features.csv": {
        "label": "true category",
        "pred": "global model prediction",
        "f_1..f_d": "normalized feature vector of the final global model",
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _missing(tree: dict, path: str = "") -> list[str]:
    out = []
    for key, value in tree.items():
        where = f"{path}.{key}" if path else key
        if value is REQUIRED:
            out.append(where)
        elif isinstance(value, dict):
            out.extend(_missing(value, where))
    return out


@dataclass
class ExperimentFile:
    federation: FedConfig
    raw: dict
    source_path: Path | None = None
    given: dict = field(default_factory=dict)

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def output_dir(self) -> Path:
        out = Path(self.raw["output"]["dir"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            return Path(root) / out
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def defaults_report(self) -> str:
        used = []

        def walk(defaults, given, path):
            for key, value in defaults.items():
                where = f"{path}.{key}" if path else key
                if isinstance(value, dict):
                    walk(value, given.get(key, {}) if isinstance(given, dict) else {}, where)
                elif not isinstance(given, dict) or key not in given:
                    used.append(f"  {where} = {value!r} (default)")

        walk(DEFAULTS, self.given, "")
        return "\n".join(used)


def parse_experiment(doc: dict, source_path: Path | None = None) -> ExperimentFile:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("experiment file must be a mapping at top level")
    merged = _merge(DEFAULTS, doc)
    missing = _missing(merged)
    if missing:
        raise ConfigError(f"required key {missing[0]!r} is not set (no default for algorithm-critical values)")
    fed = dict(merged["federation"])
    fed["hidden_dims"] = tuple(merged["model"]["hidden_dims"])
    try:
        cfg = FedConfig(**fed)
    except ConfigError as exc:
        raise ConfigError(f"federation: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"federation: {exc}") from None
    _validate_data(merged["data"])
    return ExperimentFile(cfg, merged, source_path, doc)


def load_experiment(path) -> ExperimentFile:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return parse_experiment(doc, path)


def preset(overrides: dict | None = None, benchmark: bool = False) -> ExperimentFile:
    doc = _merge(DEFAULTS, BENCHMARK if benchmark else PRESET)
    if overrides:
        doc = _merge(doc, overrides)
    return parse_experiment(_strip_required(doc))


def _strip_required(tree):
    return {k: _strip_required(v) if isinstance(v, dict) else v for k, v in tree.items() if v is not REQUIRED}


def _validate_data(data: dict):
    if data["source"] not in ("synthetic", "csv"):
        raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {data['source']!r}")
    if data["source"] == "csv" and (not data["csv"]["path"] or not data["csv"]["C"]):
        raise ConfigError("data.csv.path and data.csv.C are required when data.source is 'csv'")
    scheme = data["partition"]["scheme"]
    if scheme not in ("dirichlet", "dominant", "missing"):
        raise ConfigError(f"data.partition.scheme must be dirichlet, dominant or missing, got {scheme!r}")
    if not 0 < data["test_frac"] < 1:
        raise ConfigError("data.test_frac must lie in (0, 1)")


def build_data(exp: ExperimentFile) -> tuple[ClientSplit, LabeledDataset]:
    """Generate or load the dataset, hold out a test set, and partition the rest."""
    data = exp.data
    seed = int(data["seed"])
    if data["source"] == "synthetic":
        s = data["synthetic"]
        full = gen_gaussian_mixture(
            int(s["C"]), int(s["d_in"]), int(s["n_per_class"]), float(s["separation"]), seed, int(s["modes_per_class"])
        )
    else:
        path = Path(data["csv"]["path"])
        if not path.is_absolute() and exp.source_path is not None:
            path = exp.source_path.parent / path
        full = load_csv_dataset(path, int(data["csv"]["C"]))
    train, test = holdout_split(full, float(data["test_frac"]), seed, strict=False)
    part = data["partition"]
    K = exp.federation.K
    if part["scheme"] == "dirichlet":
        split = partition_dirichlet(train, K, float(part["beta"]), seed)
    elif part["scheme"] == "dominant":
        split = partition_dominant(train, K, float(part["dominant_frac"]), seed)
    else:
        split = partition_missing(train, K, int(part["missing"]), seed)
    return split, test


@dataclass
class RunOutcome:
    exp: ExperimentFile
    result: ExperimentResult
    summary: dict
    dump: FeatureDump


def execute(exp: ExperimentFile) -> RunOutcome:
    split, test = build_data(exp)
    result = run_experiment(exp.federation, split, test)
    dump = feature_dump(result.final_params, test, seed=exp.federation.seed)
    nmi_v, ss_v = feature_quality(dump, test.num_classes, seed=exp.federation.seed)
    summary = {
        "algorithm": exp.federation.algorithm,
        "config_hash": exp.config_hash(),
        "data_seed": int(exp.data["seed"]),
        "seed": exp.federation.seed,
        "rounds": len(result.records),
        "best_test_accuracy": result.best_test_accuracy,
        "nmi": nmi_v,
        "silhouette": ss_v,
        "total_floats": result.ledger.floats,
        "total_handshakes": result.ledger.handshakes,
        "model_rounds": result.ledger.model_rounds,
    }
    return RunOutcome(exp, result, summary, dump)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _rows_csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def rounds_csv(records: list[RoundRecord]) -> str:
    names = [f.name for f in fields(RoundRecord)]
    return _rows_csv(names, ([getattr(r, n) for n in names] for r in records))


def ledger_csv(entries: list[LedgerEntry]) -> str:
    names = [f.name for f in fields(LedgerEntry)]
    return _rows_csv(names, ([getattr(e, n) for n in names] for e in entries))


def write_outputs(outcome: RunOutcome, out_dir: Path | None = None) -> Path:
    out = Path(out_dir) if out_dir is not None else outcome.exp.output_dir
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "rounds.csv", rounds_csv(outcome.result.records))
    atomic_write(out / "ledger.csv", ledger_csv(outcome.result.ledger.entries))
    atomic_write(out / "summary.json", json.dumps(outcome.summary, indent=2, sort_keys=True) + "\n")
    atomic_write(out / "schema.json", json.dumps(CSV_SCHEMA, indent=2) + "\n")
    outcome.dump.write_csv(out / "features.csv")
    return out


def summary_line(summary: dict) -> str:
    return (
        f"{summary['algorithm']}: test_acc={summary['best_test_accuracy']:.4f} "
        f"nmi={summary['nmi']:.4f} ss={summary['silhouette']:.4f} "
        f"floats={summary['total_floats']} handshakes={summary['total_handshakes']}"
    )


__all__ = [
    "ExperimentFile",
    "FedFMError",
    "build_data",
    "execute",
    "load_experiment",
    "parse_experiment",
    "preset",
    "write_outputs",
]
