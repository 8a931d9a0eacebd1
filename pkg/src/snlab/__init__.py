"""Switchable Normalization with hand-derived backward passes."""

__version__ = "0.1.0"

from .baseline import BaselineParams, baseline_backward, baseline_forward
from .inference import batch_average, moving_average_finalize
from .snlayer import (
    GradBundle,
    ImportanceWeights,
    SNParams,
    harden,
    ratio_divergence,
    sn_backward,
    sn_backward_sync,
    sn_forward,
    sn_forward_sync,
    softmax_weights,
)
from .stats import (
    StatPair,
    bn_stats_from_in,
    direct_stats,
    gn_stats,
    in_stats,
    ln_stats_from_in,
    sync_bn_stats,
)
