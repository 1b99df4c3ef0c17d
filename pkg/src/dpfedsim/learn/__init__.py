"""Synthetic segmentation task: data, toy models, and metrics."""

from .data import (
    CLASS_NAMES,
    NUM_CLASSES,
    SegDataset,
    gen_dataset,
    load_dataset,
    partition,
    save_dataset,
)
from .metrics import SegMetrics, seg_metrics
from .models import (
    MODEL_KINDS,
    Model,
    class_scores,
    evaluate,
    forward_loss_grad,
    model_layout,
    predict,
)

__all__ = [
    "CLASS_NAMES",
    "NUM_CLASSES",
    "SegDataset",
    "gen_dataset",
    "load_dataset",
    "partition",
    "save_dataset",
    "SegMetrics",
    "seg_metrics",
    "MODEL_KINDS",
    "Model",
    "class_scores",
    "evaluate",
    "forward_loss_grad",
    "model_layout",
    "predict",
]
