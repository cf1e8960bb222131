"""Crowd counting with an attention-weighted multi-column CNN, on a small numpy autodiff engine."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .data import Sample, SynthConfig, load_dataset, synth_dataset
from .density import DensityMap, HeadAnnotations, RoiMask, SigmaPolicy, density_from_annotations
from .losses import EvalReport, LossConfig
from .model import build_model, forward
from .trainer import evaluate, finetune, pretrain_branch, train

__version__ = "0.1.0"

__all__ = [
    "DensityMap",
    "EvalReport",
    "HeadAnnotations",
    "LossConfig",
    "RoiMask",
    "Sample",
    "SigmaPolicy",
    "SynthConfig",
    "TrainConfig",
    "build_model",
    "density_from_annotations",
    "evaluate",
    "finetune",
    "forward",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "pretrain_branch",
    "save_checkpoint",
    "synth_dataset",
    "train",
]
