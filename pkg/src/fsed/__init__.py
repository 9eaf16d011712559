"""Few-shot sound event detection with a background-aware metric embedding.

A residual CNN maps 1-second log-mel windows to 128-dim embeddings, trained
with a weighted-margin contrastive loss over balanced synthetic pairs in
which event-free background audio is an explicit class. At inference, k
support examples of a novel event class form a prototype; long query audio
is swept window by window and thresholded distances become time-stamped
detections, scored with onset-collar event F1.
"""
from .dsp import AudioClip, FeatureConfig, MelFeatures, extract_features
from .detector import DetectionEvent, Prototype, SupportSet
from .embedding import NetworkConfig, NetworkParams
from .errors import FsedError
from .evaluator import EvalReport, Event
from .loss import LossConfig
from .synthesis import SamplerConfig, SourceBank
from .trainer import TrainConfig, TrainHistory

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "DetectionEvent",
    "EvalReport",
    "Event",
    "FeatureConfig",
    "FsedError",
    "LossConfig",
    "MelFeatures",
    "NetworkConfig",
    "NetworkParams",
    "Prototype",
    "SamplerConfig",
    "SourceBank",
    "SupportSet",
    "TrainConfig",
    "TrainHistory",
    "extract_features",
    "__version__",
]
