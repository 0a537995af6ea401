"""Gradient verification suites: every differentiable op, and the whole network loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import (
    ConvSpec,
    Tensor,
    add,
    channel_affine,
    concat,
    concat_channels,
    conv2d,
    exp,
    grad_check,
    max_pool,
    mul,
    params_grad_check,
    relu,
    reshape,
    sigmoid,
    take,
    transpose,
    tsum,
    upsample2x,
)

OP_TOLERANCE = 1e-6
NETWORK_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # random weights so no output coordinate's gradient is trivially shared
    return tsum(mul(out, Tensor(w)))


def _op_cases(rng):
    from .training.losses import bce_with_logits, focal_loss, giou_loss

    def t(*shape, lo=None):
        a = rng.standard_normal(shape)
        if lo is not None:
            a = lo + np.abs(a)
        return Tensor(a, requires_grad=True)

    cases = []

    def case(name, fn, inputs, out_shape=None, kink=False):
        w = rng.standard_normal(out_shape) if out_shape is not None else None
        f = (lambda *xs: _weighted(fn(*xs), w)) if w is not None else fn
        cases.append((name, f, inputs, kink))

    case("add", add, [t(2, 3, 4, 4), t(2, 3, 4, 4)], (2, 3, 4, 4))
    case("add_scalar_broadcast", add, [t(2, 3, 4, 4), t()], (2, 3, 4, 4))
    case("add_map_broadcast", add, [t(2, 3, 4, 4), t(2, 1, 4, 4)], (2, 3, 4, 4))
    case("mul", mul, [t(2, 3, 4, 4), t(2, 3, 4, 4)], (2, 3, 4, 4))
    case("mul_channel_broadcast", mul, [t(2, 3, 4, 4), t(2, 1, 4, 4)], (2, 3, 4, 4))
    case("relu", relu, [t(2, 3, 4, 4)], (2, 3, 4, 4), kink=True)
    case("sigmoid", sigmoid, [t(2, 3, 4, 4)], (2, 3, 4, 4))
    case("exp", exp, [t(2, 3, 4, 4)], (2, 3, 4, 4))
    case("sum", lambda x: mul(tsum(x), tsum(x)), [t(3, 4)])
    case("reshape", lambda x: reshape(x, (6, 8)), [t(2, 3, 8)], (6, 8))
    case("transpose", lambda x: transpose(x, (0, 2, 1)), [t(2, 3, 5)], (2, 5, 3))
    case("concat", lambda a, b: concat([a, b], axis=1), [t(2, 3, 4), t(2, 2, 4)], (2, 5, 4))
    case("concat_channels", lambda a, b: concat_channels([a, b]), [t(1, 2, 3, 3), t(1, 3, 3, 3)], (1, 5, 3, 3))
    case("channel_affine", channel_affine, [t(2, 3, 4, 4), t(3), t(3)], (2, 3, 4, 4))
    for k, s, p in ((3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (7, 2, 3)):
        spec = ConvSpec(2, 3, k, s, p)
        ho = (7 + 2 * p - k) // s + 1
        case(f"conv2d_k{k}s{s}p{p}", lambda x, w, b, spec=spec: conv2d(x, w, b, spec),
             [t(2, 2, 7, 7), t(3, 2, k, k), t(3)], (2, 3, ho, ho))
    # distinct values 0.01 apart keep every window's argmax away from ties
    pool_in = Tensor((rng.permutation(2 * 2 * 8 * 8) * 0.01 - 1.28).reshape(2, 2, 8, 8), requires_grad=True)
    case("max_pool", lambda x: max_pool(x, 3, 2, 1), [pool_in], (2, 2, 4, 4))
    case("upsample2x", lambda x: upsample2x(x), [t(1, 2, 3, 3)], (1, 2, 6, 6))
    case("upsample2x_odd", lambda x: upsample2x(x, size=(7, 5)), [t(1, 2, 4, 3)], (1, 2, 7, 5))
    case("take", lambda x: take(x, np.array([0, 2, 2, 4]), axis=0), [t(5, 3)], (4, 3))

    labels = rng.integers(0, 3, 12)
    case("focal_loss", lambda x: focal_loss(x, labels), [t(12, 2)])
    target = np.abs(rng.standard_normal((6, 4))) + 0.5
    wts = rng.uniform(0.1, 1.0, 6)
    case("giou_loss", lambda x: giou_loss(x, target, weights=wts), [t(6, 4, lo=0.5)])
    ys = rng.uniform(0, 1, 10)
    case("bce_with_logits", lambda x: bce_with_logits(x, ys), [t(10)])
    return cases


def op_suite(tolerance: float = OP_TOLERANCE, seed: int = 0, h: float = 1e-4, order: int = 4) -> list:
    """Coordinate-wise central differences for every op in float64."""
    rng = np.random.default_rng(seed)
    out = []
    for name, f, inputs, kink in _op_cases(rng):
        err = grad_check(f, inputs if len(inputs) > 1 else inputs[0], h=h, kink_guard=kink, order=order)
        out.append(CheckResult(name, float(err), tolerance))
    return out


def network_check(probes: int = 20, tolerance: float = NETWORK_TOLERANCE, seed: int = 0,
                  input_size: int = 128, fusion: str = "SAC", h: float = 1e-6) -> CheckResult:
    """Directional check of the total detection loss w.r.t. all parameters.

    Uses a float64 model and a single simulated frame.
    """
    from .model import RVPAFCOS, ModelConfig, pyramid_sizes
    from .scene_sim import SimConfig, generate_frame
    from .training import LossConfig, assign_targets, prepare_sample, total_loss
    from .data import Sample

    cfg = ModelConfig(input_size=input_size, fusion=fusion, dtype="float64", seed=seed,
                      residual_scale_init=0.5)
    model = RVPAFCOS(cfg)
    _, vision, boxes, _, radar = generate_frame(SimConfig(image_size=input_size), seed, 0)
    sample = prepare_sample(Sample(0, "", vision, radar, np.array([b for _, b in boxes]).reshape(-1, 4)),
                            input_size)
    shapes = [(n, n) for n in pyramid_sizes(input_size)]
    targets = [assign_targets(sample.boxes, shapes, cfg.strides, input_size)]
    vis, rad = sample.vision[None], sample.radar[None]

    def loss_fn():
        loss, _ = total_loss(model(vis, rad), targets, LossConfig())
        return loss

    worst, _ = params_grad_check(loss_fn, model.parameters(), probes=probes, h=h,
                                 rng=np.random.default_rng(seed))
    return CheckResult(f"network_{fusion.lower()}_{input_size}px_{probes}probes", float(worst), tolerance)
