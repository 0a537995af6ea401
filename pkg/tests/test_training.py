import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvfusion.data import load_dataset
from rvfusion.model import RVPAFCOS, HeadOutput, ModelConfig, pyramid_sizes
from rvfusion.tensor_core import Tensor
from rvfusion.training import (
    DivergenceError,
    LossConfig,
    PreparedSample,
    TrainConfig,
    assign_targets,
    bce_with_logits,
    box_giou,
    centerness_loss,
    centerness_target,
    focal_loss,
    giou_loss,
    level_ranges,
    prepare_sample,
    total_loss,
    train,
    write_loss_csv,
)

STRIDES = (8, 16, 32, 64, 128)


def _shapes(size):
    return [(n, n) for n in pyramid_sizes(size)]


# -- targets --------------------------------------------------------------------------------------

def test_centerness_examples():
    assert centerness_target([[5, 5, 5, 5]])[0] == 1.0
    assert math.isclose(centerness_target([[1, 2, 3, 2]])[0], math.sqrt(1 / 3))


def test_level_ranges_scale_with_input():
    assert level_ranges(800)[0] == (0.0, 64.0)
    assert level_ranges(128)[1] == pytest.approx((10.24, 20.48))


def test_40px_box_positive_only_on_stride_8():
    tm = assign_targets([[380, 380, 420, 420]], _shapes(800), STRIDES, 800)
    counts = [int(lv.pos_mask.sum()) for lv in tm.levels]
    assert counts[0] > 0 and counts[1:] == [0, 0, 0, 0]


def test_positive_regression_targets_are_consistent():
    box = np.array([20.0, 30.0, 90.0, 70.0])
    tm = assign_targets([box], _shapes(128), STRIDES, 128)
    assert tm.num_pos > 0
    for lv, stride, (h, w) in zip(tm.levels, STRIDES, _shapes(128)):
        ys, xs = np.divmod(np.flatnonzero(lv.pos_mask), w)
        cx, cy = (xs + 0.5) * stride, (ys + 0.5) * stride
        reg = lv.reg[lv.pos_mask]
        assert (reg > 0).all()
        assert np.allclose(np.stack([cx - reg[:, 0], cy - reg[:, 1], cx + reg[:, 2], cy + reg[:, 3]], 1), box)
        assert not lv.reg[~lv.pos_mask].any() and (lv.cls[lv.pos_mask] == 1).all()


def test_ambiguous_location_takes_smaller_box():
    big, small = [0, 0, 100, 100], [40, 40, 60, 60]
    tm = assign_targets([big, small], [(1, 1)], (100,), 800, ranges=[(0, np.inf)])
    assert np.allclose(tm.levels[0].reg[0], [10, 10, 10, 10])


def test_no_gt_gives_no_positives_and_degenerate_rejected():
    assert assign_targets(np.zeros((0, 4)), _shapes(128), STRIDES, 128).num_pos == 0
    with pytest.raises(ValueError):
        assign_targets([[10, 10, 10, 20]], _shapes(128), STRIDES, 128)


# -- losses -----------------------------------------------------------------------------------------

def test_focal_closed_form():
    v = focal_loss(Tensor(np.zeros((1, 1))), [1]).item()
    assert math.isclose(v, 0.25 * 0.25 * math.log(2), rel_tol=1e-12)
    assert math.isclose(v, 0.043322, abs_tol=5e-7)


def test_focal_degenerates_to_cross_entropy():
    x = np.array([[0.3], [-1.2], [2.0]])
    y = np.array([1, 0, 1])
    v = focal_loss(Tensor(x), y, alpha=None, gamma=0.0, normalizer=1.0).item()
    p = 1 / (1 + np.exp(-x[:, 0]))
    ce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum()
    assert math.isclose(v, ce, rel_tol=1e-12)


def test_focal_confident_predictions_vanish():
    assert focal_loss(Tensor(np.array([[30.0], [-30.0]])), [1, 0]).item() < 1e-20


def test_giou_examples():
    assert math.isclose(box_giou([0, 0, 2, 2], [1, 1, 3, 3]), 1 / 7 - 2 / 9)
    # same pair expressed as ltrb around the shared anchor (1.5, 1.5)
    v = giou_loss(Tensor(np.array([[1.5, 1.5, 0.5, 0.5]])), [[0.5, 0.5, 1.5, 1.5]]).item()
    assert math.isclose(v, 1.079365, abs_tol=5e-7)
    assert giou_loss(Tensor(np.array([[3.0, 1.0, 2.0, 4.0]])), [[3.0, 1.0, 2.0, 4.0]]).item() == 0.0
    assert box_giou([0, 0, 1, 1], [1e6, 1e6, 1e6 + 1, 1e6 + 1]) < -0.999999


@settings(max_examples=50)
@given(st.lists(st.floats(0.1, 50), min_size=8, max_size=8))
def test_giou_loss_range(vals):
    v = giou_loss(Tensor(np.array([vals[:4]])), [vals[4:]]).item()
    assert -1e-12 <= v <= 2.0


def test_bce_and_centerness_examples():
    assert math.isclose(bce_with_logits(Tensor(np.zeros(1)), [1.0]).item(), math.log(2))
    assert centerness_loss(Tensor(np.ones((1, 1, 2, 2))), np.full(4, 0.5), np.zeros(4, bool)).item() == 0.0
    # minimum over logits is at sigmoid(x) = target
    t = 0.3
    best = centerness_loss(Tensor(np.full(1, math.log(t / (1 - t)))), [t], [True]).item()
    for dx in (-0.1, 0.1):
        assert centerness_loss(Tensor(np.full(1, math.log(t / (1 - t)) + dx)), [t], [True]).item() > best


def _head_and_targets(seed=0, n=1, size=128):
    rng = np.random.default_rng(seed)
    sizes = pyramid_sizes(size)
    cls = [Tensor(rng.standard_normal((1, 1, s, s)), requires_grad=True) for s in sizes]
    reg = [Tensor(np.exp(rng.standard_normal((1, 4, s, s))) * 8, requires_grad=True) for s in sizes]
    ctr = [Tensor(rng.standard_normal((1, 1, s, s)), requires_grad=True) for s in sizes]
    tm = assign_targets([[20, 20, 60, 50], [70, 40, 120, 110]], _shapes(size), STRIDES, size)
    if n > 1:
        cls, reg, ctr = ([Tensor(np.concatenate([t.data] * n)) for t in ts] for ts in (cls, reg, ctr))
    return HeadOutput(cls, reg, ctr, STRIDES, size), tm


def test_duplicated_batch_leaves_loss_unchanged():
    h1, tm = _head_and_targets(n=1)
    h2, _ = _head_and_targets(n=2)
    _, b1 = total_loss(h1, [tm])
    _, b2 = total_loss(h2, [tm, tm])
    assert b2["num_pos"] == 2 * b1["num_pos"]
    for k in ("total", "cls", "reg", "centerness"):
        assert math.isclose(b1[k], b2[k], rel_tol=1e-12)


def test_total_loss_terms():
    head, tm = _head_and_targets()
    _, parts = total_loss(head, [tm])
    assert parts["cls"] >= 0 and 0 <= parts["reg"] <= 2 and parts["centerness"] >= 0
    assert math.isclose(parts["total"], parts["cls"] + parts["reg"] + parts["centerness"], rel_tol=1e-12)
    _, only_cls = total_loss(head, [tm], LossConfig(lambda_reg=0.0, use_centerness=False))
    assert only_cls["total"] == only_cls["cls"] == parts["cls"]


def test_no_gt_zeroes_reg_and_centerness():
    head, _ = _head_and_targets()
    empty = assign_targets(np.zeros((0, 4)), _shapes(128), STRIDES, 128)
    loss, parts = total_loss(head, [empty])
    assert parts["reg"] == 0.0 and parts["centerness"] == 0.0 and parts["num_pos"] == 0
    loss.backward()
    assert not any(t.grad.any() for t in head.reg if t.grad is not None)


def test_giou_of_target_against_itself_is_zero():
    _, tm = _head_and_targets()
    _, reg, _, pos = tm.flat()
    assert giou_loss(Tensor(reg[pos]), reg[pos]).item() == pytest.approx(0.0, abs=1e-15)


def test_target_count_mismatch_rejected():
    head, _ = _head_and_targets()
    with pytest.raises(ValueError):
        total_loss(head, [assign_targets(np.zeros((0, 4)), _shapes(256), STRIDES, 256)])


# -- loop -------------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_samples(desk_dataset):
    root, _ = desk_dataset
    return load_dataset(root, "train")


def _model(seed=0):
    return RVPAFCOS(ModelConfig(input_size=128, dtype="float32", seed=seed))


def test_zero_lr_leaves_weights_unchanged(desk_samples):
    m = _model()
    before = [p.data.copy() for p in m.parameters()]
    train(m, desk_samples, TrainConfig(lr=0.0, iterations=3, batch_pairs=2))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))


def test_training_is_deterministic(desk_samples, tmp_path):
    cfg = TrainConfig(iterations=4, batch_pairs=2, seed=3)
    r1 = train(_model(), desk_samples, cfg)
    r2 = train(_model(), desk_samples, cfg)
    assert r1.curve == r2.curve
    write_loss_csv(r1.curve, tmp_path / "a.csv")
    write_loss_csv(r2.curve, tmp_path / "b.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "iteration,total,cls,reg,centerness" and len(lines) == 5
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_eval_hook_runs_at_interval_and_end(desk_samples):
    calls = []
    train(_model(), desk_samples, TrainConfig(iterations=5, batch_pairs=1, eval_interval=2),
          eval_fn=lambda m, it: calls.append(it) or it)
    assert calls == [2, 4, 5]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_guard_reports_iteration(desk_samples):
    bad = prepare_sample(desk_samples[0], 128)
    bad = PreparedSample(np.full_like(bad.vision, np.nan), bad.radar, bad.boxes)
    with pytest.raises(DivergenceError, match="iteration 1"):
        train(_model(), [bad], TrainConfig(iterations=2, batch_pairs=1))


def test_prepare_sample_rescales_boxes(desk_samples):
    s = desk_samples[0]
    p = prepare_sample(s, 64)
    assert p.vision.shape == (3, 64, 64) and p.scale == (0.5, 0.5)
    assert np.allclose(p.boxes, np.asarray(s.boxes) * 0.5)
    assert set(np.unique(p.radar * 255).round().astype(int)) <= set(np.unique(s.radar).tolist())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_pairs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    assert TrainConfig.from_dict({"lr": 0.01, "bogus": 1}).lr == 0.01
