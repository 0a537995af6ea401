"""COCO-convention AP/AR evaluation for box detections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .boxes import iou, iou_matrix

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, 1e10),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, 1e10),
}
MISSING = -1.0

__all__ = [
    "IOU_THRESHOLDS", "RECALL_THRESHOLDS", "AREA_RANGES", "MISSING",
    "MetricReport", "iou", "match_greedy", "compute_metrics", "evaluate_records",
    "format_table", "brute_force_metrics",
]


@dataclass(frozen=True)
class MetricReport:
    ap: float
    ap50: float
    ap75: float
    ap_small: float
    ap_medium: float
    ap_large: float
    ar1: float
    ar10: float
    ar100: float
    ar_small: float
    ar_medium: float
    ar_large: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})

    def values(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]

    def to_text(self, label: str = "model") -> str:
        return format_table({label: self})


AP_COLUMNS = (("AP(100)", "ap"), ("AP50(100)", "ap50"), ("AP75(100)", "ap75"),
              ("APs(100)", "ap_small"), ("APm(100)", "ap_medium"), ("APl(100)", "ap_large"))
AR_COLUMNS = (("AR(1)", "ar1"), ("AR(10)", "ar10"), ("AR(100)", "ar100"),
              ("ARs(100)", "ar_small"), ("ARm(100)", "ar_medium"), ("ARl(100)", "ar_large"))


def format_table(reports: dict) -> str:
    """Aligned text table: an AP block then an AR block, one row per labelled report."""
    label_w = max([len("Fusion module")] + [len(k) for k in reports])
    lines = []
    for cols in (AP_COLUMNS, AR_COLUMNS):
        widths = [max(len(h), 6) for h, _ in cols]
        lines.append("  ".join([f"{'Fusion module':<{label_w}}"] + [f"{h:>{w}}" for (h, _), w in zip(cols, widths)]))
        for label, rep in reports.items():
            cells = [f"{getattr(rep, k):>{w}.1f}" for (_, k), w in zip(cols, widths)]
            lines.append("  ".join([f"{label:<{label_w}}"] + cells))
    return "\n".join(lines)


# -- matching ---------------------------------------------------------------------------------

def _area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def match_greedy(det_boxes, gt_boxes, iou_thresh: float, gt_ignore=None, ious=None):
    """Match detections (already in score order) to ground truth one-to-one.

    Each detection takes the best still-free GT with IoU >= ``iou_thresh``:
    non-ignored GTs beat ignored ones, then higher IoU, then lower GT index.
    Returns (det_match, gt_match) index arrays with -1 for unmatched.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    nd, ng = len(det_boxes), len(gt_boxes)
    ig = np.zeros(ng, bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    if ious is None:
        ious = iou_matrix(det_boxes, gt_boxes) if nd and ng else np.zeros((nd, ng))
    det_match = np.full(nd, -1, dtype=np.int64)
    gt_match = np.full(ng, -1, dtype=np.int64)
    thr = min(iou_thresh, 1 - 1e-10)
    for d in range(nd):
        best, best_key = -1, None
        for g in range(ng):
            if gt_match[g] >= 0 or ious[d, g] < thr:
                continue
            key = (not ig[g], ious[d, g])
            if best_key is None or key > best_key:
                best, best_key = g, key
        if best >= 0:
            det_match[d] = best
            gt_match[best] = d
    return det_match, gt_match


# -- accumulation --------------------------------------------------------------------------------

def _sorted_dets(dets):
    boxes, scores = dets
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    return boxes[order], scores[order]


def _evaluate_image(det_boxes, gt_boxes, area_rng, max_det):
    """Per-threshold match flags for one image and one area range."""
    det_boxes = det_boxes[:max_det]
    gt_area = _area(gt_boxes)
    gt_ig = (gt_area < area_rng[0]) | (gt_area > area_rng[1])
    # non-ignored GTs first, stable
    g_order = np.argsort(gt_ig, kind="stable")
    gt_boxes, gt_ig = gt_boxes[g_order], gt_ig[g_order]
    ious = iou_matrix(det_boxes, gt_boxes) if len(det_boxes) and len(gt_boxes) else \
        np.zeros((len(det_boxes), len(gt_boxes)))
    det_area = _area(det_boxes)
    det_out = (det_area < area_rng[0]) | (det_area > area_rng[1])
    tps, igs = [], []
    for t in IOU_THRESHOLDS:
        dm, _ = match_greedy(det_boxes, gt_boxes, t, gt_ig, ious)
        matched = dm >= 0
        ignored = np.where(matched, gt_ig[np.maximum(dm, 0)], det_out) if len(gt_ig) else det_out
        tps.append(matched)
        igs.append(ignored)
    return np.array(tps).reshape(len(IOU_THRESHOLDS), -1), np.array(igs).reshape(len(IOU_THRESHOLDS), -1), \
        int((~gt_ig).sum())


def _accumulate(per_image, scores_per_image):
    """Precision at each recall threshold and final recall, per IoU threshold.

    Returns (precision (T, R), recall (T,)) or None when no GT is in range.
    """
    n_gt = sum(p[2] for p in per_image)
    if n_gt == 0:
        return None
    if any(len(s) for s in scores_per_image):
        scores = np.concatenate(scores_per_image)
        tp = np.concatenate([p[0] for p in per_image], axis=1)
        ig = np.concatenate([p[1] for p in per_image], axis=1)
    else:
        scores = np.zeros(0)
        tp = ig = np.zeros((len(IOU_THRESHOLDS), 0), bool)
    order = np.argsort(-scores, kind="stable")
    tp, ig = tp[:, order], ig[:, order]
    precision = np.zeros((len(IOU_THRESHOLDS), len(RECALL_THRESHOLDS)))
    recall = np.zeros(len(IOU_THRESHOLDS))
    for t in range(len(IOU_THRESHOLDS)):
        keep = ~ig[t]
        tps = np.cumsum(tp[t][keep]).astype(np.float64)
        fps = np.cumsum(~tp[t][keep]).astype(np.float64)
        if len(tps) == 0:
            continue
        rc = tps / n_gt
        pr = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
        recall[t] = rc[-1]
        pr = np.maximum.accumulate(pr[::-1])[::-1]
        inds = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
        valid = inds < len(pr)
        precision[t, valid] = pr[inds[valid]]
    return precision, recall


def _normalize(dets: dict, gts: dict):
    image_ids = sorted(set(gts) | set(dets))
    out_d, out_g = {}, {}
    for i in image_ids:
        d = dets.get(i, (np.zeros((0, 4)), np.zeros(0)))
        out_d[i] = _sorted_dets(d)
        out_g[i] = np.asarray(gts.get(i, np.zeros((0, 4))), dtype=np.float64).reshape(-1, 4)
    return image_ids, out_d, out_g


def _category_stats(dets: dict, gts: dict, max_dets: int):
    """AP/AR arrays for one category: {(area, maxdet): (precision, recall) | None}."""
    image_ids, dets, gts = _normalize(dets, gts)
    out = {}
    for area_name, rng in AREA_RANGES.items():
        for md in sorted({1, 10, max_dets}):
            per_image = [_evaluate_image(dets[i][0], gts[i], rng, md) for i in image_ids]
            scores = [dets[i][1][:md] for i in image_ids]
            out[(area_name, md)] = _accumulate(per_image, scores)
    return out


def _mean_ap(stats_list, key, t_index=None):
    vals = []
    for stats in stats_list:
        res = stats.get(key)
        if res is None:
            continue
        prec = res[0] if t_index is None else res[0][t_index:t_index + 1]
        vals.append(prec.mean())
    return float(np.mean(vals)) * 100.0 if vals else MISSING


def _mean_ar(stats_list, key):
    vals = [stats[key][1].mean() for stats in stats_list if stats.get(key) is not None]
    return float(np.mean(vals)) * 100.0 if vals else MISSING


def _report(stats_list, max_dets):
    t50 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.5)))
    t75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    return MetricReport(
        ap=_mean_ap(stats_list, ("all", max_dets)),
        ap50=_mean_ap(stats_list, ("all", max_dets), t50),
        ap75=_mean_ap(stats_list, ("all", max_dets), t75),
        ap_small=_mean_ap(stats_list, ("small", max_dets)),
        ap_medium=_mean_ap(stats_list, ("medium", max_dets)),
        ap_large=_mean_ap(stats_list, ("large", max_dets)),
        ar1=_mean_ar(stats_list, ("all", 1)),
        ar10=_mean_ar(stats_list, ("all", 10)),
        ar100=_mean_ar(stats_list, ("all", max_dets)),
        ar_small=_mean_ar(stats_list, ("small", max_dets)),
        ar_medium=_mean_ar(stats_list, ("medium", max_dets)),
        ar_large=_mean_ar(stats_list, ("large", max_dets)),
    )


def compute_metrics(dets: dict, gts: dict, max_dets: int = 100) -> MetricReport:
    """Single-category COCO metrics in percent.

    ``gts`` maps image id to an (n, 4) xyxy array; ``dets`` maps image id to
    ``(boxes (m, 4), scores (m,))``. Buckets without GT report -1.
    """
    if max_dets < 1:
        raise ValueError("max_dets must be >= 1")
    return _report([_category_stats(dets, gts, max_dets)], max_dets)


def evaluate_records(det_records: list, ann: dict, max_dets: int = 100) -> MetricReport:
    """Metrics from COCO-style dicts: detection records and an annotation set.

    Categories are evaluated independently and averaged.
    """
    from .boxes import xywh_to_xyxy
    image_ids = [im["id"] for im in ann["images"]]
    cats = sorted({c["id"] for c in ann.get("categories", [])} |
                  {a["category_id"] for a in ann["annotations"]})
    stats_list = []
    for cat in cats:
        gts = {i: [] for i in image_ids}
        for a in ann["annotations"]:
            if a["category_id"] == cat:
                gts[a["image_id"]].append(xywh_to_xyxy(a["bbox"]))
        dets = {i: ([], []) for i in image_ids}
        for d in det_records:
            if d["category_id"] == cat and d["image_id"] in dets:
                dets[d["image_id"]][0].append(xywh_to_xyxy(d["bbox"]))
                dets[d["image_id"]][1].append(float(d["score"]))
        stats_list.append(_category_stats(dets, gts, max_dets))
    return _report(stats_list, max_dets)


# -- brute-force reference -------------------------------------------------------------------------

def _brute_match(det_boxes, gt_boxes, gt_ig, thr):
    """Enumerate every one-to-one assignment; keep the lexicographically best in score order."""
    nd, ng = len(det_boxes), len(gt_boxes)
    best_seq, best_assign = None, None

    def rec(d, used, seq, assign):
        nonlocal best_seq, best_assign
        if d == nd:
            if best_seq is None or seq > best_seq:
                best_seq, best_assign = list(seq), list(assign)
            return
        options = [(-1, (0, 0, 0.0, 0))]
        for g in range(ng):
            v = iou(det_boxes[d], gt_boxes[g])
            if g not in used and v >= thr:
                options.append((g, (1, int(not gt_ig[g]), v, -g)))
        for g, key in options:
            rec(d + 1, used | ({g} if g >= 0 else set()), seq + [key], assign + [g])

    rec(0, frozenset(), [], [])
    return best_assign


def _brute_ap(flags, n_gt):
    """Interpolated precision per recall threshold, straight from the definition
    (max precision at recall >= r), and the final recall."""
    tp = fp = 0
    points = []
    for is_tp in flags:
        tp += is_tp
        fp += not is_tp
        points.append((tp / n_gt, tp / (tp + fp)))
    interp = []
    for r in RECALL_THRESHOLDS:
        cands = [p for rc, p in points if rc >= r]
        interp.append(max(cands) if cands else 0.0)
    return np.array(interp), (points[-1][0] if points else 0.0)


def brute_force_metrics(dets: dict, gts: dict, max_dets: int = 100) -> MetricReport:
    """Independent slow implementation for small instances (testing only)."""
    image_ids = sorted(set(gts) | set(dets))
    stats = {}
    for area_name, (lo, hi) in AREA_RANGES.items():
        for md in sorted({1, 10, max_dets}):
            rows = []
            n_gt = 0
            for i in image_ids:
                boxes, scores = dets.get(i, ([], []))
                boxes = [tuple(map(float, b)) for b in boxes]
                order = sorted(range(len(boxes)), key=lambda k: (-float(scores[k]), k))[:md]
                db = [boxes[k] for k in order]
                ds = [float(scores[k]) for k in order]
                gb = [tuple(map(float, b)) for b in np.asarray(gts.get(i, []), dtype=np.float64).reshape(-1, 4)]
                g_area = [(b[2] - b[0]) * (b[3] - b[1]) for b in gb]
                g_ig = [a < lo or a > hi for a in g_area]
                n_gt += sum(not x for x in g_ig)
                rows.append((i, db, ds, gb, g_ig))
            if n_gt == 0:
                stats[(area_name, md)] = None
                continue
            prec = np.zeros((len(IOU_THRESHOLDS), len(RECALL_THRESHOLDS)))
            rec_t = np.zeros(len(IOU_THRESHOLDS))
            for t_i, thr in enumerate(IOU_THRESHOLDS):
                scored = []
                for i, db, ds, gb, g_ig in rows:
                    assign = _brute_match(db, gb, g_ig, min(thr, 1 - 1e-10))
                    for k, g in enumerate(assign):
                        d_area = (db[k][2] - db[k][0]) * (db[k][3] - db[k][1])
                        ignored = g_ig[g] if g >= 0 else (d_area < lo or d_area > hi)
                        if not ignored:
                            scored.append((-ds[k], i, k, g >= 0))
                scored.sort(key=lambda x: x[:3])
                ap, rc = _brute_ap([s[3] for s in scored], n_gt)
                prec[t_i, :] = ap
                rec_t[t_i] = rc
            stats[(area_name, md)] = (prec, rec_t)
    return _report([stats], max_dets)
