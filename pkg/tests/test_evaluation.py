import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvfusion.boxes import iou
from rvfusion.evaluation import (
    MISSING,
    MetricReport,
    brute_force_metrics,
    compute_metrics,
    evaluate_records,
    format_table,
    match_greedy,
)


def micro_instance(rng, n_images=None, max_boxes=4):
    """Random small instance on a coarse grid so IoU and score ties occur."""
    n_images = n_images or int(rng.integers(1, 4))
    dets, gts = {}, {}
    for i in range(n_images):
        def boxes(k):
            xy = rng.integers(0, 12, (k, 2)) * 10.0
            wh = rng.choice([5.0, 20.0, 40.0, 60.0, 110.0], (k, 2))
            return np.concatenate([xy, xy + wh], axis=1)
        gts[i] = boxes(int(rng.integers(0, max_boxes + 1)))
        nd = int(rng.integers(0, max_boxes + 1))
        db = boxes(nd)
        # half the detections are jittered copies of GTs
        for d in range(nd):
            if len(gts[i]) and rng.random() < 0.5:
                db[d] = gts[i][rng.integers(len(gts[i]))] + rng.integers(-1, 2, 4) * 5.0
                db[d, 2:] = np.maximum(db[d, 2:], db[d, :2] + 5)
        dets[i] = (db, rng.choice([0.3, 0.5, 0.9], nd))
    return dets, gts


def test_iou_examples():
    assert iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert math.isclose(iou([0, 0, 2, 2], [1, 1, 3, 3]), 1 / 7)


def test_match_examples():
    gt = [[0, 0, 10, 10]]
    dm, gm = match_greedy([[0, 0, 10, 6]], gt, 0.5)
    assert dm.tolist() == [0]
    dm, gm = match_greedy([[0, 0, 10, 10], [0, 0, 10, 9]], gt, 0.5)
    assert dm.tolist() == [0, -1] and gm.tolist() == [0]


def test_match_prefers_higher_iou_then_lower_index():
    gts = [[0, 0, 10, 10], [0, 0, 10, 10], [0, 0, 10, 8]]
    dm, _ = match_greedy([[0, 0, 10, 9]], gts, 0.5)
    assert dm.tolist() == [0]
    dm, _ = match_greedy([[0, 0, 10, 10], [0, 0, 10, 10]], gts, 0.5)
    assert dm.tolist() == [0, 1]


def test_crossing_case_matches_brute_force():
    # det 0 overlaps both GTs, det 1 only GT 0: greedy gives det 0 the better GT
    gts = np.array([[0, 0, 10, 10], [4, 0, 14, 10]], float)
    dets = {0: (np.array([[1, 0, 11, 10], [0, 0, 9, 10], [5, 0, 14, 10]], float), np.array([0.9, 0.8, 0.7]))}
    dm, _ = match_greedy(dets[0][0], gts, 0.5)
    assert dm.tolist() == [0, -1, 1]
    assert compute_metrics(dets, {0: gts}) == brute_force_metrics(dets, {0: gts})


def test_hand_case_single_det_iou_072():
    gt = {0: np.array([[0.0, 0.0, 100.0, 100.0]])}
    dets = {0: (np.array([[0.0, 0.0, 100.0, 72.0]]), np.array([0.9]))}
    r = compute_metrics(dets, gt)
    assert (r.ap50, r.ap75, r.ap) == (100.0, 0.0, 50.0)
    assert r == brute_force_metrics(dets, gt)


def test_perfect_and_empty_detections():
    gts = {0: np.array([[0, 0, 20, 20]], float), 1: np.array([[30, 30, 80, 80]], float),
           2: np.array([[0, 0, 150, 150]], float)}
    perfect = {i: (g, np.ones(len(g))) for i, g in gts.items()}
    assert all(v == 100.0 for v in compute_metrics(perfect, gts).values())
    two = {0: np.array([[0, 0, 20, 20], [30, 30, 80, 80]], float)}
    r = compute_metrics({0: (two[0], [1.0, 1.0])}, two)
    assert r.ap == r.ar10 == 100.0 and r.ar1 == 50.0
    none = {i: (np.zeros((0, 4)), np.zeros(0)) for i in gts}
    assert all(v == 0.0 for v in compute_metrics(none, gts).values())


def test_empty_bucket_sentinel():
    gts = {0: np.array([[0, 0, 50, 50]], float)}  # medium only
    r = compute_metrics({0: (gts[0], [1.0])}, gts)
    assert r.ap_small == r.ap_large == r.ar_small == r.ar_large == MISSING
    assert r.ap_medium == 100.0


def test_report_serialisation_and_table():
    r = MetricReport(*[float(i) for i in range(12)])
    assert MetricReport.from_dict(json.loads(r.to_json())) == r
    table = format_table({"ADD": r, "SAC": r})
    lines = table.splitlines()
    assert len(lines) == 6 and lines[0].startswith("Fusion module") and "AP50(100)" in lines[0]
    assert "AR(10)" in lines[3] and lines[4].startswith("ADD")


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_brute_force_on_micro_instances(seed):
    dets, gts = micro_instance(np.random.default_rng(seed))
    assert compute_metrics(dets, gts) == brute_force_metrics(dets, gts)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_report_invariants(seed):
    dets, gts = micro_instance(np.random.default_rng(seed), max_boxes=6)
    r = compute_metrics(dets, gts)
    for v in r.values():
        assert v == MISSING or 0.0 <= v <= 100.0
    if r.ap50 != MISSING:
        assert r.ap <= r.ap50 + 1e-9
        assert r.ar1 <= r.ar10 <= r.ar100


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_duplicate_low_score_fp_never_raises_ap(seed):
    rng = np.random.default_rng(seed)
    dets, gts = micro_instance(rng)
    i = int(rng.integers(len(dets)))
    # with at most one GT in the image the lower-score copy can never be a TP
    gts[i] = gts[i][:1]
    base = compute_metrics(dets, gts)
    boxes, scores = dets[i]
    if not len(boxes):
        return
    k = int(rng.integers(len(boxes)))
    low = float(np.min(scores)) * 0.5
    dets2 = dict(dets)
    dets2[i] = (np.vstack([boxes, boxes[k]]), np.append(scores, low))
    after = compute_metrics(dets2, gts)
    for f in ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large"):
        assert getattr(after, f) <= getattr(base, f) + 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_image_order_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    dets, gts = micro_instance(rng, n_images=4)
    perm = rng.permutation(4).tolist()
    d2 = {i: dets[i] for i in perm}
    g2 = {i: gts[i] for i in reversed(perm)}
    assert compute_metrics(dets, gts) == compute_metrics(d2, g2)
    # with distinct scores even relabelling the images changes nothing
    dets = {i: (b, rng.uniform(0, 1, len(b))) for i, (b, _) in dets.items()}
    relabel = dict(zip(range(4), perm))
    d3 = {relabel[i]: v for i, v in dets.items()}
    g3 = {relabel[i]: v for i, v in gts.items()}
    assert compute_metrics(dets, gts) == compute_metrics(d3, g3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ar10_equals_ar100_with_few_dets(seed):
    dets, gts = micro_instance(np.random.default_rng(seed), max_boxes=8)
    r = compute_metrics(dets, gts)
    assert r.ar10 == r.ar100


def test_max_dets_cap():
    gts = {0: np.array([[0, 0, 50, 50], [60, 60, 110, 110]], float)}
    dets = {0: (gts[0], np.array([0.9, 0.8]))}
    assert compute_metrics(dets, gts, max_dets=1).ar100 == 50.0
    with pytest.raises(ValueError):
        compute_metrics(dets, gts, max_dets=0)


def test_evaluate_records_matches_dict_api():
    ann = {
        "images": [{"id": 5, "file_name": "a.png", "width": 128, "height": 128}],
        "annotations": [{"id": 1, "image_id": 5, "category_id": 1, "bbox": [10, 10, 40, 30], "area": 1200.0,
                         "iscrowd": 0}],
        "categories": [{"id": 1, "name": "vehicle"}],
    }
    recs = [{"image_id": 5, "category_id": 1, "bbox": [10, 10, 40, 28], "score": 0.8}]
    r = evaluate_records(recs, ann)
    ref = compute_metrics({5: (np.array([[10, 10, 50, 38.0]]), [0.8])}, {5: np.array([[10, 10, 50, 40.0]])})
    assert r == ref
