"""Multi-instance body-sound classification with dual waveform/spectrogram encoders
and self-attention fusion."""

from .core import AudioClip, InstanceKind, Label, Manifest, read_manifest, write_manifest
from .model import FairModel, ModelSpec
from .training import ExperimentConfig, FoldSplit, TrainConfig, split_folds

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "ExperimentConfig",
    "FairModel",
    "FoldSplit",
    "InstanceKind",
    "Label",
    "Manifest",
    "ModelSpec",
    "TrainConfig",
    "read_manifest",
    "split_folds",
    "write_manifest",
]
