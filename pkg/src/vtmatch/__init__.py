"""Conditioned video/text matching: interaction-attention embeddings,
hierarchical triplet training and two-stage retrieval."""

from .conditioning import ConditionedPair, ProjectionPair
from .data import Dataset, ParagraphRecord, SyntheticConfig, VideoRecord
from .hierarchy import AblationFlags, JointEmbedding, ModelDims, ModelParams
from .retrieval import RetrievalMetrics, StaticIndex
from .training import LossBreakdown, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "ConditionedPair",
    "Dataset",
    "JointEmbedding",
    "LossBreakdown",
    "ModelDims",
    "ModelParams",
    "ParagraphRecord",
    "ProjectionPair",
    "RetrievalMetrics",
    "StaticIndex",
    "SyntheticConfig",
    "TrainConfig",
    "VideoRecord",
    "__version__",
]
