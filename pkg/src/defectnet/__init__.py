"""End-to-end training of a two-stage segmentation + classification defect detector."""

from .data import DatasetSplit, ImageSample, RotatedBox, SynthSpec, load_dataset, synth_generate
from .evaluate import EvalReport, aggregate_folds, average_precision, best_f_measure, evaluate_model
from .loss import MixSchedule, compute_weight_mask, lambda_at, total_loss
from .model import ModelConfig, TwoStageModel, build_model
from .sampling import SamplerState, build_epoch_stream, select_negatives
from .train import TrainConfig, Toggles, ablate, train

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit",
    "EvalReport",
    "ImageSample",
    "MixSchedule",
    "ModelConfig",
    "RotatedBox",
    "SamplerState",
    "SynthSpec",
    "Toggles",
    "TrainConfig",
    "TwoStageModel",
    "ablate",
    "aggregate_folds",
    "average_precision",
    "best_f_measure",
    "build_epoch_stream",
    "build_model",
    "compute_weight_mask",
    "evaluate_model",
    "lambda_at",
    "load_dataset",
    "select_negatives",
    "synth_generate",
    "total_loss",
    "train",
]
