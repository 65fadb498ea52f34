"""Multi-negative preference optimization for a small differentiable recommender.

The package trains a softmax item recommender in two stages (next-item SFT,
then preference optimization against a frozen reference) and implements
boundary-negative selection with per-negative dynamic beta on top of the
standard multi-negative objectives.
"""

from .beta import BetaConfig, DualMargins, dual_margins, dynamic_beta
from .core import (
    Context,
    InvalidParameterError,
    LikelihoodRecord,
    LogRatioSet,
    PreferenceInstance,
    derive_seed,
    likelihood_gaps,
    log_ratios,
    spawn_rng,
)
from .data import (
    DataFormatError,
    DatasetSplit,
    EvalCandidateSet,
    InteractionLog,
    SplitEntry,
    build_eval_candidates,
    chronological_split,
    export_csv,
    generate_synthetic,
    ingest_csv,
    sample_negatives,
)
from .estimator import PreferenceRecommender
from .harness import RunConfig, TrainingDivergedError, run_sweep, run_timing, run_training
from .losses import (
    BetaVector,
    LossOutput,
    decompose_negative_gradient,
    dmpo_loss,
    dpo_loss,
    mppo_loss,
    sdpo_loss,
)
from .metrics import (
    MetricsReport,
    boundary_fraction_curve,
    hit_ratio_at_1,
    mean_selected_negatives,
    reward_win_rate,
)
from .policy import (
    Adam,
    PolicyModel,
    ReferenceModel,
    Variant,
    likelihood_records,
    load_checkpoint,
    log_prob,
    parse_variant,
    po_step,
    save_checkpoint,
    sft_step,
)
from .selection import (
    BoundarySelection,
    GapPartition,
    kmeans_1d,
    partition_by_gap,
    select_boundary,
    violation_set,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BetaConfig",
    "BetaVector",
    "BoundarySelection",
    "Context",
    "DataFormatError",
    "DatasetSplit",
    "DualMargins",
    "EvalCandidateSet",
    "GapPartition",
    "InteractionLog",
    "InvalidParameterError",
    "LikelihoodRecord",
    "LogRatioSet",
    "LossOutput",
    "MetricsReport",
    "PolicyModel",
    "PreferenceInstance",
    "PreferenceRecommender",
    "ReferenceModel",
    "RunConfig",
    "SplitEntry",
    "TrainingDivergedError",
    "Variant",
    "boundary_fraction_curve",
    "build_eval_candidates",
    "chronological_split",
    "decompose_negative_gradient",
    "derive_seed",
    "dmpo_loss",
    "dpo_loss",
    "dual_margins",
    "dynamic_beta",
    "export_csv",
    "generate_synthetic",
    "hit_ratio_at_1",
    "ingest_csv",
    "kmeans_1d",
    "likelihood_gaps",
    "likelihood_records",
    "load_checkpoint",
    "log_prob",
    "log_ratios",
    "mean_selected_negatives",
    "mppo_loss",
    "parse_variant",
    "partition_by_gap",
    "po_step",
    "reward_win_rate",
    "run_sweep",
    "run_timing",
    "run_training",
    "sample_negatives",
    "save_checkpoint",
    "sdpo_loss",
    "select_boundary",
    "sft_step",
    "spawn_rng",
    "violation_set",
]
