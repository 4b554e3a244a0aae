"""Multi-granularity unsupervised representation learning for time series."""

from .config import FineEncoderConfig, FusionConfig, MUGConfig, SaxConfig, TrainConfig
from .fusion import MUGModel, cross_attention, cross_granularity_block, fine_fuse, mug_represent
from .train import fit, hard_rank, retrieval_loss, soft_rank, spearman_similarity

__version__ = "0.1.0"

__all__ = [
    "FineEncoderConfig",
    "FusionConfig",
    "MUGConfig",
    "MUGModel",
    "SaxConfig",
    "TrainConfig",
    "cross_attention",
    "cross_granularity_block",
    "fine_fuse",
    "fit",
    "hard_rank",
    "mug_represent",
    "retrieval_loss",
    "soft_rank",
    "spearman_similarity",
]
