"""Head outputs -> scored, suppressed pixel boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..boxes import nms
from ..tensor_core.ops import _sigmoid


@dataclass(frozen=True)
class DetectionBox:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    class_id: int

    def xyxy(self):
        return (self.x1, self.y1, self.x2, self.y2)


def level_locations(h: int, w: int, stride: int) -> np.ndarray:
    """Pixel centres (x, y) of a level's cells, row-major, shape (h*w, 2)."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(xs.reshape(-1) + 0.5) * stride, (ys.reshape(-1) + 0.5) * stride], axis=1)


def _data(t):
    return t.data if hasattr(t, "data") and not isinstance(t, np.ndarray) else np.asarray(t)


def decode_detections(head, score_thresh: float = 0.05, nms_iou: float = 0.6,
                      max_dets: int = 100, pre_nms_top_n: int = 1000,
                      image_size: int | None = None) -> list:
    """Decode every image of the batch; returns one list of boxes per image.

    Class ids are 1-based (0 is background).
    """
    size = image_size if image_size is not None else head.image_size
    batch = _data(head.cls_logits[0]).shape[0]
    results = []
    for n in range(batch):
        boxes, scores, labels = [], [], []
        for cls_t, reg_t, ctr_t, stride in zip(head.cls_logits, head.reg, head.centerness, head.strides):
            cls = _data(cls_t)[n]
            reg = _data(reg_t)[n]
            ctr = _data(ctr_t)[n]
            c, h, w = cls.shape
            loc = level_locations(h, w, stride)
            prob = _sigmoid(cls.reshape(c, -1).astype(np.float64))
            cprob = _sigmoid(ctr.reshape(-1).astype(np.float64))
            score = np.sqrt(prob * cprob[None, :])
            ltrb = reg.reshape(4, -1).T.astype(np.float64)
            xyxy = np.stack([
                loc[:, 0] - ltrb[:, 0], loc[:, 1] - ltrb[:, 1],
                loc[:, 0] + ltrb[:, 2], loc[:, 1] + ltrb[:, 3],
            ], axis=1)
            xyxy = np.clip(xyxy, 0, size)
            valid = (xyxy[:, 2] > xyxy[:, 0]) & (xyxy[:, 3] > xyxy[:, 1])
            for k in range(c):
                keep = valid & (score[k] > score_thresh)
                if keep.any():
                    boxes.append(xyxy[keep])
                    scores.append(score[k][keep])
                    labels.append(np.full(int(keep.sum()), k + 1))
        if not boxes:
            results.append([])
            continue
        boxes = np.concatenate(boxes)
        scores = np.concatenate(scores)
        labels = np.concatenate(labels)
        if len(scores) > pre_nms_top_n:
            top = np.argsort(-scores, kind="stable")[:pre_nms_top_n]
            boxes, scores, labels = boxes[top], scores[top], labels[top]
        kept = []
        for cls_id in np.unique(labels):
            idx = np.flatnonzero(labels == cls_id)
            kept.extend(idx[nms(boxes[idx], scores[idx], nms_iou)])
        kept = np.asarray(kept, dtype=np.intp)
        kept = kept[np.argsort(-scores[kept], kind="stable")][:max_dets]
        results.append([
            DetectionBox(*map(float, boxes[i]), score=float(scores[i]), class_id=int(labels[i]))
            for i in kept
        ])
    return results
