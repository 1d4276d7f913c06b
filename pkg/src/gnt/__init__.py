"""Globally normalized streaming transducer toolkit.

Log-space lattice algorithms over unnormalized per-node weights, a tiny
streaming transducer model with exact reverse-mode gradients, N-best
globally normalized training objectives, time-synchronous beam search,
and expectation-semiring emission-latency measurement.
"""

from gnt.lattice import (
    LOG_ZERO,
    OracleSizeError,
    WeightGrid,
    apply_partial_normalization,
    brute_force_score,
    enumerate_paths,
    forward_score,
    logsumexp,
    occupancy_gradients,
    path_to_labels,
)
from gnt.losses import (
    HypothesisSet,
    global_nbest_loss,
    interpolated_loss,
    local_nll,
    normalization_regularizer,
    total_objective,
)
from gnt.model import (
    CheckpointError,
    ModelConfig,
    ModelParams,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from gnt.search import beam_search, build_training_hypotheses, decode

__all__ = [
    "LOG_ZERO",
    "OracleSizeError",
    "WeightGrid",
    "apply_partial_normalization",
    "brute_force_score",
    "enumerate_paths",
    "forward_score",
    "logsumexp",
    "occupancy_gradients",
    "path_to_labels",
    "HypothesisSet",
    "global_nbest_loss",
    "interpolated_loss",
    "local_nll",
    "normalization_regularizer",
    "total_objective",
    "CheckpointError",
    "ModelConfig",
    "ModelParams",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "beam_search",
    "build_training_hypotheses",
    "decode",
]
