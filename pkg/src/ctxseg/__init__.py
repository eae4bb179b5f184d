"""Open-vocabulary instance segmentation with scene-context refinement."""

from .encoders import (
    EncoderDescriptor,
    FeatureGrid,
    GlobalContextToken,
    ImageTensor,
    make_synthetic_vlm,
    resolve_vlm,
)
from .estimator import OpenVocabSegmenter
from .evaluation import EvalReport, evaluate, mask_iou
from .inference import EnsembleConfig, SegmentationResult, ensemble_scores
from .model import SceneContextModel
from .proposals import GroundTruthInstance, InstanceProposalSet, LossWeights
from .vocabulary import CategorySet, VocabularyEmbedding, build_classifier

__version__ = "0.1.0"

__all__ = [
    "CategorySet",
    "EncoderDescriptor",
    "EnsembleConfig",
    "EvalReport",
    "FeatureGrid",
    "GlobalContextToken",
    "GroundTruthInstance",
    "ImageTensor",
    "InstanceProposalSet",
    "LossWeights",
    "OpenVocabSegmenter",
    "SceneContextModel",
    "SegmentationResult",
    "VocabularyEmbedding",
    "build_classifier",
    "ensemble_scores",
    "evaluate",
    "make_synthetic_vlm",
    "mask_iou",
    "resolve_vlm",
]
