"""Robust audio tagging with two peer networks and cross-wise noise filtering."""

from .data import BiQualityDataset, Item, load_manifest
from .dsp import AudioClip, FrameConfig, RepKind, TimeFreqRep, represent
from .losses import LossConfig
from .model import DualHeadModel, TrainConfig, predict_clip
from .noise_filter import FilterConfig, PartitionState, filter_epoch, step_schedule, train_crossfilter

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "BiQualityDataset", "DualHeadModel", "FilterConfig", "FrameConfig", "Item", "LossConfig",
    "PartitionState", "RepKind", "TimeFreqRep", "TrainConfig", "filter_epoch", "load_manifest",
    "predict_clip", "represent", "step_schedule", "train_crossfilter",
]
