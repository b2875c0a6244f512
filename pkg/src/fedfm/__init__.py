"""Federated learning with anchor-based feature matching, simulated on one machine."""

from .anchors import (
    LocalAnchorReport,
    aggregate_uniform,
    aggregate_weighted,
    direct_global_anchors,
    local_anchors,
)
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
from .losses import AnchorSet, LossBreakdown, cg_loss, combined_local_loss, cross_entropy, l2_match_loss, normalize_features
from .metrics import accuracy, global_objective, kmeans, lemma2_monitor, nmi, silhouette
from .nn import MlpParams, init_mlp, mlp_backward, mlp_forward, param_count, sgd_step, weighted_param_sum
from .protocol import CommLedger, FedConfig, RoundRecord, local_train, run_experiment

__version__ = "0.1.0"
