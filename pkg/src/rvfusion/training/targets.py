"""FCOS-style per-location target assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model.decode import level_locations

BASE_RANGES = ((0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, 512.0), (512.0, np.inf))
REFERENCE_INPUT = 800


@dataclass
class LevelTargets:
    cls: np.ndarray          # (L,) int, 0 = background
    reg: np.ndarray          # (L, 4) l*, t*, r*, b* (zeros off-mask)
    centerness: np.ndarray   # (L,)
    pos_mask: np.ndarray     # (L,) bool


@dataclass
class TargetMap:
    levels: list

    @property
    def num_pos(self) -> int:
        return int(sum(lv.pos_mask.sum() for lv in self.levels))

    def flat(self):
        """Concatenate all levels in level order (matches flattened head output)."""
        return (
            np.concatenate([lv.cls for lv in self.levels]),
            np.concatenate([lv.reg for lv in self.levels]),
            np.concatenate([lv.centerness for lv in self.levels]),
            np.concatenate([lv.pos_mask for lv in self.levels]),
        )


def level_ranges(input_size: int) -> list:
    scale = input_size / REFERENCE_INPUT
    return [(lo * scale, hi * scale) for lo, hi in BASE_RANGES]


def centerness_target(ltrb: np.ndarray) -> np.ndarray:
    ltrb = np.asarray(ltrb, dtype=np.float64).reshape(-1, 4)
    lr = ltrb[:, [0, 2]]
    tb = ltrb[:, [1, 3]]
    return np.sqrt((lr.min(1) / lr.max(1)) * (tb.min(1) / tb.max(1)))


def validate_gt(gt_boxes) -> np.ndarray:
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    bad = np.flatnonzero((gt[:, 2] <= gt[:, 0]) | (gt[:, 3] <= gt[:, 1]))
    if len(bad):
        raise ValueError(f"degenerate ground-truth box(es) at index {bad.tolist()}")
    return gt


def assign_targets(gt_boxes, shapes, strides, input_size: int, gt_classes=None,
                   ranges=None) -> TargetMap:
    """Assign each pyramid location to at most one ground-truth box.

    ``shapes`` lists (H, W) per level. A location is positive when it lies
    strictly inside a box and its largest regression distance falls in the
    level's range; ties between boxes go to the smallest area.
    """
    gt = validate_gt(gt_boxes)
    classes = np.ones(len(gt), dtype=np.int64) if gt_classes is None else np.asarray(gt_classes, dtype=np.int64)
    ranges = level_ranges(input_size) if ranges is None else ranges
    areas = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    levels = []
    for (h, w), stride, (lo, hi) in zip(shapes, strides, ranges):
        loc = level_locations(h, w, stride)
        n = len(loc)
        if len(gt) == 0:
            levels.append(LevelTargets(np.zeros(n, np.int64), np.zeros((n, 4)), np.zeros(n), np.zeros(n, bool)))
            continue
        x = loc[:, 0:1]
        y = loc[:, 1:2]
        ltrb = np.stack([x - gt[None, :, 0], y - gt[None, :, 1], gt[None, :, 2] - x, gt[None, :, 3] - y], axis=2)
        inside = ltrb.min(axis=2) > 0
        mx = ltrb.max(axis=2)
        ok = inside & (mx > lo) & (mx <= hi)
        cand_area = np.where(ok, areas[None, :], np.inf)
        best = cand_area.argmin(axis=1)
        pos = np.isfinite(cand_area[np.arange(n), best])
        reg = np.zeros((n, 4))
        reg[pos] = ltrb[np.flatnonzero(pos), best[pos]]
        cls = np.where(pos, classes[best], 0)
        ctr = np.zeros(n)
        if pos.any():
            ctr[pos] = centerness_target(reg[pos])
        levels.append(LevelTargets(cls.astype(np.int64), reg, ctr, pos))
    return TargetMap(levels)
