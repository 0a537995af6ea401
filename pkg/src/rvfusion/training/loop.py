"""SGD training loop, batched inference and sample preprocessing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from ..model import RVPAFCOS, decode_detections, pyramid_sizes
from ..tensor_core import SGD, no_grad
from .losses import LossConfig, total_loss
from .targets import assign_targets

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    iterations: int = 2000
    batch_pairs: int = 4
    lambda_reg: float = 1.0
    focal_alpha: float | None = 0.25
    focal_gamma: float = 2.0
    use_centerness: bool = True
    reg_weighting: str = "centerness"
    eval_interval: int = 2500
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_pairs < 1:
            raise ValueError("iterations must be >= 0 and batch_pairs >= 1")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative")

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lambda_reg=self.lambda_reg,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
            use_centerness=self.use_centerness,
            reg_weighting=self.reg_weighting,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([row["total"] for row in self.curve])


@dataclass
class PreparedSample:
    vision: np.ndarray   # (3, S, S) float in [0, 1]
    radar: np.ndarray    # (3, S, S)
    boxes: np.ndarray    # (n, 4) xyxy at network resolution
    image_id: int = 0
    scale: tuple = (1.0, 1.0)   # (sx, sy) original -> network


def _to_chw(img: np.ndarray, size: int, resample) -> tuple:
    img = np.asarray(img)
    h, w = img.shape[:2]
    if (h, w) != (size, size):
        img = np.asarray(Image.fromarray(img).resize((size, size), resample))
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0, (size / w, size / h)


def prepare_sample(sample, input_size: int) -> PreparedSample:
    """Plain square resize to the network input; boxes scaled to match."""
    vision, scale = _to_chw(sample.vision, input_size, Image.BILINEAR)
    # nearest keeps radar colour codes intact
    radar, _ = _to_chw(sample.radar, input_size, Image.NEAREST)
    boxes = np.asarray(sample.boxes, dtype=np.float64).reshape(-1, 4) * np.array([scale[0], scale[1]] * 2)
    return PreparedSample(vision, radar, boxes, int(getattr(sample, "image_id", 0)), scale)


def _batch(prepared, idx, dtype):
    vis = np.stack([prepared[i].vision for i in idx]).astype(dtype)
    rad = np.stack([prepared[i].radar for i in idx]).astype(dtype)
    return vis, rad


def train(model: RVPAFCOS, samples, cfg: TrainConfig, eval_fn=None, progress=None) -> TrainResult:
    """Train in place with SGD; deterministic for a fixed ``cfg.seed``.

    ``samples`` are dataset samples (vision, radar, boxes) or already
    :class:`PreparedSample`. ``eval_fn(model, iteration)`` is called every
    ``eval_interval`` iterations and at the end; its return value is recorded.
    """
    size = model.cfg.input_size
    prepared = [s if isinstance(s, PreparedSample) else prepare_sample(s, size) for s in samples]
    if not prepared:
        raise ValueError("training needs at least one sample")
    shapes = [(n, n) for n in pyramid_sizes(size)]
    targets = [assign_targets(p.boxes, shapes, model.cfg.strides, size) for p in prepared]
    loss_cfg = cfg.loss_config()
    params = model.parameters()
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    dtype = model.cfg.np_dtype
    order: list = []
    result = TrainResult()

    for it in range(1, cfg.iterations + 1):
        idx = []
        while len(idx) < cfg.batch_pairs:
            if not order:
                order = rng.permutation(len(prepared)).tolist()
            idx.append(order.pop(0))
        vis, rad = _batch(prepared, idx, dtype)
        head = model(vis, rad)
        loss, parts = total_loss(head, [targets[i] for i in idx], loss_cfg)
        if not math.isfinite(parts["total"]):
            raise DivergenceError(it, parts["total"])
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.curve.append({"iteration": it, **{k: parts[k] for k in ("total", "cls", "reg", "centerness")}})
        if progress is not None:
            progress(it, parts)
        due = cfg.eval_interval > 0 and it % cfg.eval_interval == 0
        if eval_fn is not None and (due or it == cfg.iterations):
            result.evals.append({"iteration": it, "metrics": eval_fn(model, it)})
    return result


def predict(model: RVPAFCOS, samples, batch_size: int = 8, score_thresh: float = 0.05,
            nms_iou: float = 0.6, max_dets: int = 100, rescale: bool = True) -> list:
    """Detections per sample; boxes mapped back to original pixels when ``rescale``."""
    size = model.cfg.input_size
    prepared = [s if isinstance(s, PreparedSample) else prepare_sample(s, size) for s in samples]
    out = []
    dtype = model.cfg.np_dtype
    with no_grad():
        for start in range(0, len(prepared), batch_size):
            idx = list(range(start, min(start + batch_size, len(prepared))))
            vis, rad = _batch(prepared, idx, dtype)
            dets = decode_detections(model(vis, rad), score_thresh, nms_iou, max_dets)
            for i, boxes in zip(idx, dets):
                sx, sy = prepared[i].scale if rescale else (1.0, 1.0)
                out.append([
                    type(b)(b.x1 / sx, b.y1 / sy, b.x2 / sx, b.y2 / sy, b.score, b.class_id) for b in boxes
                ])
    return out


def write_loss_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "total", "cls", "reg", "centerness"])
        for row in curve:
            w.writerow([row["iteration"], repr(row["total"]), repr(row["cls"]), repr(row["reg"]),
                        repr(row["centerness"])])
