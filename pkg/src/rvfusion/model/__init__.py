"""RV-PAFCOS network, its building blocks and box decoding."""

from .decode import DetectionBox, decode_detections, level_locations
from .layers import Module
from .rvpafcos import (
    FUSION_MODES,
    STRIDES,
    RVPAFCOS,
    FeaturePyramid,
    HeadOutput,
    ModelConfig,
    pyramid_sizes,
)

__all__ = [
    "RVPAFCOS", "ModelConfig", "FeaturePyramid", "HeadOutput", "DetectionBox", "Module",
    "decode_detections", "level_locations", "pyramid_sizes", "FUSION_MODES", "STRIDES",
]
