"""Affinity contrastive learning on synthetic skeleton sequences.

Confusion statistics drive per-class neighbor sets and an affinity
similarity that clusters classes into motion families; an inter-class
contrastive loss with a family-aware temperature and an intra-class
margin-based loss then sharpen the embedding space of a toy graph
encoder trained end to end with SGD.
"""

from .affinity import (AffinityModel, ConfusionStats, affinity_similarity,
                       build_affinity_model, build_motion_families,
                       family_temperature, merge_confusion, record_confusion,
                       top_k_neighbors)
from .backbone import (EncodeOutput, EncoderParams, SkeletonGraph, encode,
                       graph_conv_layer, normalize_adjacency)
from .data import (GenConfig, SkeletonDataset, generate_synthetic,
                   load_dataset, split_dataset, write_dataset)
from .errors import (FormatError, MagicMismatchError, NumericalError,
                     TruncatedPayloadError, ValidationError)
from .losses import (ContrastConfig, LossBreakdown, batch_loss, cross_entropy,
                     gradient_check_report, inter_affinity_loss,
                     intra_marginal_loss, total_loss)
from .numerics import (GradEvaluation, finite_diff_grad_check, grad_eval,
                       l2_normalize, stable_log_sum_exp)
from .prototypes import PrototypeBank, ema_update
from .trainer import (Checkpoint, EpochMetrics, EvalResult, TrainConfig,
                      cosine_lr, evaluate, family_recovery_score,
                      load_checkpoint, save_checkpoint, sgd_nesterov_step,
                      train)

__all__ = [
    "AffinityModel", "Checkpoint", "ConfusionStats", "ContrastConfig",
    "EncodeOutput", "EncoderParams", "EpochMetrics", "EvalResult",
    "FormatError", "GenConfig", "GradEvaluation", "LossBreakdown",
    "MagicMismatchError", "NumericalError", "PrototypeBank",
    "SkeletonDataset", "SkeletonGraph", "TrainConfig",
    "TruncatedPayloadError", "ValidationError", "affinity_similarity",
    "batch_loss", "build_affinity_model", "build_motion_families",
    "cosine_lr", "cross_entropy", "ema_update", "encode", "evaluate",
    "family_recovery_score", "family_temperature", "finite_diff_grad_check",
    "generate_synthetic", "grad_eval", "gradient_check_report",
    "graph_conv_layer", "inter_affinity_loss", "intra_marginal_loss",
    "l2_normalize", "load_checkpoint", "load_dataset", "merge_confusion",
    "normalize_adjacency", "record_confusion", "save_checkpoint",
    "sgd_nesterov_step", "split_dataset", "stable_log_sum_exp",
    "top_k_neighbors", "total_loss", "train", "write_dataset",
]
