"""Nested dense-skip encoder-decoder segmentation networks on a small numpy autograd engine."""
from .estimator import NestedUNetSegmenter
from .graph import ArchitectureSpec, ModelGraph, NodeId, build, flop_count, forward, forward_heads, node_inputs, param_count
from .losses import LossConfig, bce_dice_loss, deep_supervision_loss, dice, iou
from .pruning import PrunedModel, prune, pruning_report
from .tensor import Parameter, Tape, Tensor
from .trainer import Checkpoint, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "Checkpoint", "LossConfig", "ModelGraph", "NestedUNetSegmenter", "NodeId",
    "Parameter", "PrunedModel", "Tape", "Tensor", "TrainConfig", "bce_dice_loss", "build",
    "deep_supervision_loss", "dice", "evaluate", "flop_count", "forward", "forward_heads", "iou",
    "node_inputs", "param_count", "prune", "pruning_report", "train",
]
