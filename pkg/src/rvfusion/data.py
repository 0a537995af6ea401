"""Annotation schema, dataset loading and detection records."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import xywh_to_xyxy, xyxy_to_xywh
from .geometry import load_rig
from .radar_imaging import RadarFrame, load_frame, render_radar_frame

CATEGORIES = [{"id": 1, "name": "vehicle"}]


class DataError(ValueError):
    """Malformed or missing dataset content."""


@dataclass
class AnnotationSet:
    images: list
    annotations: list
    categories: list = field(default_factory=lambda: [dict(c) for c in CATEGORIES])

    def validate(self) -> "AnnotationSet":
        image_ids = set()
        for im in self.images:
            for key in ("id", "file_name", "width", "height"):
                if key not in im:
                    raise DataError(f"image record {im.get('id', '?')}: missing '{key}'")
            if im["id"] in image_ids:
                raise DataError(f"image record {im['id']}: duplicate id")
            image_ids.add(im["id"])
        cat_ids = {c["id"] for c in self.categories}
        ann_ids = set()
        for a in self.annotations:
            rid = a.get("id", "?")
            for key in ("id", "image_id", "bbox", "category_id", "area"):
                if key not in a:
                    raise DataError(f"annotation record {rid}: missing '{key}'")
            if rid in ann_ids:
                raise DataError(f"annotation record {rid}: duplicate id")
            ann_ids.add(rid)
            if a["image_id"] not in image_ids:
                raise DataError(f"annotation record {rid}: unknown image_id {a['image_id']}")
            if cat_ids and a["category_id"] not in cat_ids:
                raise DataError(f"annotation record {rid}: unknown category_id {a['category_id']}")
            bbox = a["bbox"]
            if not (isinstance(bbox, list) and len(bbox) == 4 and all(isinstance(v, (int, float)) for v in bbox)):
                raise DataError(f"annotation record {rid}: bbox must be 4 numbers")
            if bbox[2] <= 0 or bbox[3] <= 0:
                raise DataError(f"annotation record {rid}: non-positive bbox size")
            if abs(a["area"] - bbox[2] * bbox[3]) > 1e-9 * max(1.0, a["area"]):
                raise DataError(f"annotation record {rid}: area != w*h")
        return self

    def to_dict(self) -> dict:
        return {"images": self.images, "annotations": self.annotations, "categories": self.categories}

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationSet":
        if not isinstance(d, dict) or "images" not in d or "annotations" not in d:
            raise DataError("annotation file needs 'images' and 'annotations'")
        return cls(list(d["images"]), list(d["annotations"]),
                   list(d.get("categories", CATEGORIES))).validate()

    def boxes_by_image(self) -> dict:
        out = {im["id"]: [] for im in self.images}
        for a in self.annotations:
            out[a["image_id"]].append(xywh_to_xyxy(a["bbox"]))
        return {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in out.items()}


def load_annotations(path) -> AnnotationSet:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"annotation file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"annotation file {path} is not valid JSON: {exc}") from exc
    return AnnotationSet.from_dict(d)


def build_annotations(records) -> AnnotationSet:
    """``records``: iterable of (image_id, file_name, width, height, xyxy boxes)."""
    images, anns = [], []
    for image_id, file_name, width, height, boxes in records:
        images.append({"id": int(image_id), "file_name": file_name, "width": int(width), "height": int(height)})
        for box in boxes:
            x, y, w, h = xyxy_to_xywh(box)
            anns.append({"id": len(anns) + 1, "image_id": int(image_id), "bbox": [x, y, w, h],
                         "category_id": 1, "area": w * h})
    return AnnotationSet(images, anns).validate()


def write_annotations(path, records) -> AnnotationSet:
    ann = build_annotations(records)
    Path(path).write_text(json.dumps(ann.to_dict(), indent=1))
    return ann


# -- samples -------------------------------------------------------------------------------------

@dataclass
class Sample:
    image_id: int
    file_name: str
    vision: np.ndarray                 # (H, W, 3) uint8
    radar: np.ndarray                  # (H, W, 3) uint8
    boxes: np.ndarray                  # (n, 4) xyxy pixels
    radar_frame: RadarFrame | None = None


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_dataset(root, split: str) -> list:
    """Paired samples of one split sorted by image id."""
    root = Path(root)
    ann = load_annotations(root / f"annotations_{split}.json")
    boxes = ann.boxes_by_image()
    rig = None
    samples = []
    for im in sorted(ann.images, key=lambda r: r["id"]):
        vpath = root / im["file_name"]
        stem = vpath.stem
        if not vpath.exists():
            raise DataError(f"frame {stem} (image {im['id']}): vision image missing at {vpath}")
        vision = _read_rgb(vpath)
        if vision.shape[:2] != (im["height"], im["width"]):
            raise DataError(f"frame {stem} (image {im['id']}): image size {vision.shape[1]}x{vision.shape[0]} "
                            f"!= annotated {im['width']}x{im['height']}")
        split_dir = vpath.parent.parent
        png = split_dir / "radar_png" / f"{stem}.png"
        raw = split_dir / "radar_raw" / f"{stem}.json"
        frame = None
        if png.exists():
            radar = _read_rgb(png)
        elif raw.exists():
            if rig is None:
                rig_path = root / "rig.json"
                if not rig_path.exists():
                    raise DataError(f"frame {stem}: raw radar needs {rig_path} to render")
                rig = load_rig(rig_path)
            try:
                frame = load_frame(raw)
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise DataError(f"frame {stem}: malformed radar frame {raw}: {exc}") from exc
            radar = render_radar_frame(frame, rig, size=(im["width"], im["height"]))
        else:
            raise DataError(f"frame {stem} (image {im['id']}): radar missing (no {png.name} or {raw.name})")
        if radar.shape != vision.shape:
            raise DataError(f"frame {stem}: radar image shape {radar.shape} != vision {vision.shape}")
        samples.append(Sample(im["id"], im["file_name"], vision, radar, boxes[im["id"]], frame))
    return samples


# -- detections ----------------------------------------------------------------------------------

def detections_to_records(image_ids, detections) -> list:
    """COCO result records: annotation fields plus ``score``."""
    out = []
    for image_id, dets in zip(image_ids, detections):
        for d in dets:
            x, y, w, h = xyxy_to_xywh((d.x1, d.y1, d.x2, d.y2))
            out.append({"id": len(out) + 1, "image_id": int(image_id), "bbox": [x, y, w, h],
                        "category_id": int(d.class_id), "area": w * h, "score": float(d.score)})
    return out


def load_detections(path) -> list:
    try:
        with open(path) as fh:
            recs = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"detections file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"detections file {path} is not valid JSON: {exc}") from exc
    if not isinstance(recs, list):
        raise DataError("detections file must hold a list of records")
    for r in recs:
        for key in ("image_id", "bbox", "category_id", "score"):
            if key not in r:
                raise DataError(f"detection record {r.get('id', '?')}: missing '{key}'")
        if len(r["bbox"]) != 4:
            raise DataError(f"detection record {r.get('id', '?')}: bbox must be 4 numbers")
    return recs
