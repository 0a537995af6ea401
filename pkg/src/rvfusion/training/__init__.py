"""Target assignment, detection losses and the SGD training loop."""

from .losses import (
    LossConfig,
    bce_with_logits,
    box_giou,
    centerness_loss,
    flatten_head,
    focal_loss,
    giou_loss,
    giou_terms,
    total_loss,
)
from .loop import (
    DivergenceError,
    PreparedSample,
    TrainConfig,
    TrainResult,
    predict,
    prepare_sample,
    train,
    write_loss_csv,
)
from .targets import LevelTargets, TargetMap, assign_targets, centerness_target, level_ranges

__all__ = [
    "LossConfig", "focal_loss", "giou_loss", "giou_terms", "box_giou", "bce_with_logits",
    "centerness_loss", "flatten_head", "total_loss", "DivergenceError", "PreparedSample",
    "TrainConfig", "TrainResult", "predict", "prepare_sample", "train", "write_loss_csv",
    "LevelTargets", "TargetMap", "assign_targets", "centerness_target", "level_ranges",
]
