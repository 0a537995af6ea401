"""Radar-vision fusion network with path aggregation and an FCOS-style head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..tensor_core import (
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv_output_size,
    exp,
    mul,
    relu,
    sigmoid,
    upsample2x,
)
from .layers import BasicBlock, Bottleneck, Conv, Module, Stem

FUSION_MODES = ("ADD", "MUL", "CAT", "SAC")
STRIDES = (8, 16, 32, 64, 128)
ALLOWED_SAC_KERNELS = (1, 3, 5, 7, 9)


@dataclass
class ModelConfig:
    input_size: int = 128
    width_mult: float = 0.125
    fusion: str = "SAC"
    sac_kernels: tuple = (1, 3, 5)
    head_tower_depth: int = 2
    num_classes: int = 1
    stage_blocks: tuple = (1, 1, 1)
    block: str = "auto"
    residual_scale_init: float = 0.0
    prior_prob: float = 0.01
    dtype: str = "float64"
    seed: int = 0
    strides: tuple = field(default=STRIDES)

    def __post_init__(self):
        self.fusion = self.fusion.upper()
        self.sac_kernels = tuple(int(k) for k in self.sac_kernels)
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        self.strides = tuple(self.strides)
        if self.input_size % 4:
            raise ValueError(f"input_size must be divisible by 4, got {self.input_size}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.fusion == "SAC" and not self.sac_kernels:
            raise ValueError("SAC fusion needs at least one attention kernel")
        bad = [k for k in self.sac_kernels if k not in ALLOWED_SAC_KERNELS]
        if bad:
            raise ValueError(f"unsupported SAC kernel sizes {bad}")
        if self.strides != STRIDES:
            raise ValueError(f"strides are fixed at {STRIDES}")
        if len(self.stage_blocks) != 3 or min(self.stage_blocks) < 1:
            raise ValueError("stage_blocks needs three positive block counts")
        if self.width_mult <= 0 or self.head_tower_depth < 0:
            raise ValueError("width_mult must be positive and head_tower_depth >= 0")

    def width(self, paper_channels: int) -> int:
        return max(1, int(round(paper_channels * self.width_mult)))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("sac_kernels", "stage_blocks", "strides"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class FeaturePyramid:
    n3: Tensor
    n4: Tensor
    n5: Tensor
    n6: Tensor
    n7: Tensor

    def levels(self) -> list:
        return [self.n3, self.n4, self.n5, self.n6, self.n7]


@dataclass
class HeadOutput:
    """Per-level head tensors (NCHW) with the level strides and input size."""

    cls_logits: list
    reg: list
    centerness: list
    strides: tuple
    image_size: int


def pyramid_sizes(input_size: int) -> list:
    """Spatial sizes of N3..N7 predicted by the conv output-size formula."""
    s = conv_output_size(input_size, 7, 2, 3)
    s = conv_output_size(s, 3, 2, 1)
    sizes = []
    for _ in range(3):
        s = conv_output_size(s, 3, 2, 1)
        sizes.append(s)
    s6 = conv_output_size(sizes[-1], 3, 2, 1)
    s7 = conv_output_size(s6, 3, 2, 1)
    return sizes + [s6, s7]


class RVPAFCOS(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        use_bottleneck = cfg.block == "bottleneck" or (cfg.block == "auto" and cfg.width_mult >= 1.0)
        block = Bottleneck if use_bottleneck else BasicBlock
        rs = cfg.residual_scale_init

        c_stem = cfg.width(64)
        c1 = cfg.width(256)
        widths = [cfg.width(512), cfg.width(1024), cfg.width(2048)]
        cp = cfg.width(256)
        self.channels = c1
        self.pyramid_channels = cp

        # vision branch: stem + three residual blocks
        self.vision_stem = Stem(c_stem, rng=rng, dtype=dt)
        self.vision_blocks = [
            block(c_stem if i == 0 else c1, c1, 1, residual_scale=rs, rng=rng, dtype=dt) for i in range(3)
        ]
        # radar branch: stem + one block, no additive terms so an empty radar image maps to zero
        self.radar_stem = Stem(c_stem, shift=False, rng=rng, dtype=dt)
        self.radar_blocks = [block(c_stem, c1, 1, shift=False, residual_scale=rs, rng=rng, dtype=dt)]

        self.fusion_reduce = None
        self.sac_convs = []
        if cfg.fusion in ("CAT", "SAC"):
            self.fusion_reduce = Conv(2 * c1, c1, 1, 1, padding=0, rng=rng, dtype=dt)
        if cfg.fusion == "SAC":
            self.sac_convs = [Conv(c1, 1, k, 1, padding=k // 2, rng=rng, dtype=dt) for k in cfg.sac_kernels]

        self.stages = []
        cin = c1
        for width, nblocks in zip(widths, cfg.stage_blocks):
            blocks = [block(cin if i == 0 else width, width, 2 if i == 0 else 1,
                            residual_scale=rs, rng=rng, dtype=dt) for i in range(nblocks)]
            self.stages.append(blocks)
            cin = width
        self.stages = [_Seq(b) for b in self.stages]

        self.lateral = [Conv(w, cp, 1, 1, padding=0, rng=rng, dtype=dt) for w in widths]
        self.smooth = [Conv(cp, cp, 3, rng=rng, dtype=dt) for _ in range(3)]
        self.down = [Conv(cp, cp, 3, 2, rng=rng, dtype=dt) for _ in range(2)]
        self.bottom_up = [Conv(cp, cp, 3, rng=rng, dtype=dt) for _ in range(2)]
        self.p6 = Conv(cp, cp, 3, 2, rng=rng, dtype=dt)
        self.p7 = Conv(cp, cp, 3, 2, rng=rng, dtype=dt)

        self.cls_tower = [Conv(cp, cp, 3, rng=rng, dtype=dt) for _ in range(cfg.head_tower_depth)]
        self.reg_tower = [Conv(cp, cp, 3, rng=rng, dtype=dt) for _ in range(cfg.head_tower_depth)]
        self.cls_logits = Conv(cp, cfg.num_classes, 3, rng=rng, dtype=dt)
        self.cls_logits.bias.data[:] = -np.log((1 - cfg.prior_prob) / cfg.prior_prob)
        self.bbox_pred = Conv(cp, 4, 3, rng=rng, dtype=dt)
        self.centerness = Conv(cp, 1, 3, rng=rng, dtype=dt)
        self.scales = [Tensor(np.ones((), dtype=dt), requires_grad=True) for _ in cfg.strides]

    # -- inputs ------------------------------------------------------------------------------
    def _as_input(self, x, name):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.cfg.np_dtype)
        if x.data.dtype != self.cfg.np_dtype:
            x = Tensor(x.data.astype(self.cfg.np_dtype))
        if x.ndim == 3:
            x = Tensor(x.data[None])
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"{name} image must be (N, 3, S, S), got {x.shape}")
        return x

    # -- stages ------------------------------------------------------------------------------
    def preprocess_vision(self, img) -> Tensor:
        x = self.vision_stem(self._as_input(img, "vision"))
        for blk in self.vision_blocks:
            x = blk(x)
        return x

    def preprocess_radar(self, img) -> Tensor:
        x = self.radar_stem(self._as_input(img, "radar"))
        for blk in self.radar_blocks:
            x = blk(x)
        return x

    def attention(self, r: Tensor) -> Tensor:
        """Radar spatial attention: sigmoid of the summed multi-scale maps."""
        acc = None
        for conv in self.sac_convs:
            a = conv(r)
            acc = a if acc is None else add(acc, a)
        return sigmoid(acc)

    def fuse(self, v: Tensor, r: Tensor) -> Tensor:
        if v.shape != r.shape:
            raise ShapeError(f"fuse: vision {v.shape} and radar {r.shape} differ")
        mode = self.cfg.fusion
        if mode == "ADD":
            return add(v, r)
        if mode == "MUL":
            return mul(v, r)
        if mode == "CAT":
            return self.fusion_reduce(concat_channels([v, r]))
        return self.fusion_reduce(concat_channels([mul(v, self.attention(r)), r]))

    def backbone_stages(self, fused: Tensor):
        c3 = self.stages[0](fused)
        c4 = self.stages[1](c3)
        c5 = self.stages[2](c4)
        return c3, c4, c5

    def path_aggregate(self, c3, c4, c5) -> FeaturePyramid:
        l3, l4, l5 = (lat(c) for lat, c in zip(self.lateral, (c3, c4, c5)))
        t5 = l5
        t4 = add(l4, upsample2x(t5, size=l4.shape[2:]))
        t3 = add(l3, upsample2x(t4, size=l3.shape[2:]))
        p3, p4, p5 = (sm(t) for sm, t in zip(self.smooth, (t3, t4, t5)))
        n3 = p3
        n4 = self.bottom_up[0](_add_checked(self.down[0](n3), p4))
        n5 = self.bottom_up[1](_add_checked(self.down[1](n4), p5))
        n6 = self.p6(n5)
        n7 = self.p7(relu(n6))
        return FeaturePyramid(n3, n4, n5, n6, n7)

    def head_forward(self, pyr: FeaturePyramid) -> HeadOutput:
        cls_out, reg_out, ctr_out = [], [], []
        for level, (feat, scale) in enumerate(zip(pyr.levels(), self.scales)):
            c = feat
            for conv in self.cls_tower:
                c = relu(conv(c))
            r = feat
            for conv in self.reg_tower:
                r = relu(conv(r))
            cls_out.append(self.cls_logits(c))
            reg_out.append(exp(mul(self.bbox_pred(r), scale)))
            ctr_out.append(self.centerness(r))
        return HeadOutput(cls_out, reg_out, ctr_out, self.cfg.strides, self.cfg.input_size)

    def features(self, vision, radar) -> FeaturePyramid:
        fused = self.fuse(self.preprocess_vision(vision), self.preprocess_radar(radar))
        return self.path_aggregate(*self.backbone_stages(fused))

    def forward(self, vision, radar) -> HeadOutput:
        return self.head_forward(self.features(vision, radar))


class _Seq(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def _add_checked(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"path aggregation size mismatch {a.shape} vs {b.shape}")
    return add(a, b)


__all__ = [
    "ModelConfig",
    "FeaturePyramid",
    "HeadOutput",
    "RVPAFCOS",
    "FUSION_MODES",
    "STRIDES",
    "pyramid_sizes",
]
