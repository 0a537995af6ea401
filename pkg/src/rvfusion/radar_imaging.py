"""Radar point cloud -> RGB radar image, plus radar/camera time alignment."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geometry import RadarDetection, SensorRig, project_radar_to_pixel

__all__ = [
    "RgbTriple",
    "RadarFrame",
    "RenderStats",
    "TimeAlignmentError",
    "quantize_rgb",
    "quantize_rgb_array",
    "render_radar_frame",
    "time_align",
    "frame_to_dict",
    "frame_from_dict",
    "load_frame",
    "save_frame",
]

DEFAULT_SPLAT_RADIUS = 2
DEFAULT_GATE = math.radians(2.0)


class RgbTriple(NamedTuple):
    r: int
    g: int
    b: int


@dataclass
class RadarFrame:
    timestamp: float
    detections: list = field(default_factory=list)


@dataclass
class RenderStats:
    rendered: int = 0
    dropped: int = 0


class TimeAlignmentError(ValueError):
    pass


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def quantize_rgb_array(d, v) -> np.ndarray:
    """Vectorized radar colour code; returns uint8 array of shape (..., 3)."""
    d = np.asarray(d, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    r = 128.0 * (d + 20.0) / 250.0 + 127.0
    g = 128.0 * (v + 40.0) / 50.0 + 127.0
    b = 128.0 * (v - 20.0) / 50.0 + 127.0
    rgb = np.stack(np.broadcast_arrays(r, g, b), axis=-1)
    return np.clip(_round_half_up(rgb), 0, 255).astype(np.uint8)


def _byte(x: float) -> int:
    return min(255, max(0, math.floor(x + 0.5)))


def quantize_rgb(d: float, v: float) -> RgbTriple:
    """Range (R) and radial velocity (G, B) to a clamped byte triple.

    Scalar twin of :func:`quantize_rgb_array` with the same float operations.
    """
    d, v = float(d), float(v)
    return RgbTriple(
        _byte(128.0 * (d + 20.0) / 250.0 + 127.0),
        _byte(128.0 * (v + 40.0) / 50.0 + 127.0),
        _byte(128.0 * (v - 20.0) / 50.0 + 127.0),
    )


def _disc_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
    keep = ox ** 2 + oy ** 2 <= r * r
    return np.stack([ox[keep], oy[keep]], axis=1)


def render_radar_frame(frame: RadarFrame, rig: SensorRig, size=None,
                       splat_radius: int = DEFAULT_SPLAT_RADIUS, return_stats: bool = False):
    """Paint every in-frame detection as a disc of its colour code.

    Untouched pixels stay black. Where discs collide the nearer return wins.
    ``size`` is (width, height) and defaults to the rig's image size.
    """
    if splat_radius < 0:
        raise ValueError("splat_radius must be >= 0")
    width, height = size if size is not None else (rig.intrinsics.width, rig.intrinsics.height)
    image = np.zeros((height, width, 3), dtype=np.uint8)
    depth = np.full((height, width), np.inf)
    stats = RenderStats()
    offsets = _disc_offsets(splat_radius)
    for det in frame.detections:
        proj = project_radar_to_pixel(det, rig)
        if not proj.in_frame:
            stats.dropped += 1
            continue
        stats.rendered += 1
        cx = int(math.floor(proj.x_p + 0.5))
        cy = int(math.floor(proj.y_p + 0.5))
        xs = cx + offsets[:, 0]
        ys = cy + offsets[:, 1]
        ok = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
        xs, ys = xs[ok], ys[ok]
        nearer = det.rho < depth[ys, xs]
        xs, ys = xs[nearer], ys[nearer]
        depth[ys, xs] = det.rho
        image[ys, xs] = quantize_rgb_array(det.rho, det.v)
    if return_stats:
        return image, stats
    return image


def _match_targets(a: list, b: list, gate: float):
    """Greedy one-to-one nearest-neighbour matching in (theta, phi).

    Returns a dict index_in_a -> index_in_b for pairs inside the gate.
    """
    pairs = []
    for i, da in enumerate(a):
        for j, db in enumerate(b):
            dth = abs(math.remainder(da.theta - db.theta, 2 * math.pi))
            dph = abs(da.phi - db.phi)
            if dth <= gate and dph <= gate:
                pairs.append((math.hypot(dth, dph), i, j))
    pairs.sort()
    used_a, used_b, out = set(), set(), {}
    for _, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out[i] = j
    return out


def _align_one(f0: RadarFrame, f1: RadarFrame, t: float, gate: float) -> RadarFrame:
    w = (t - f0.timestamp) / (f1.timestamp - f0.timestamp)
    near, far = (f0, f1) if w <= 0.5 else (f1, f0)
    w_far = w if near is f0 else 1.0 - w
    matches = _match_targets(near.detections, far.detections, gate)
    out = []
    for i, dn in enumerate(near.detections):
        j = matches.get(i)
        if j is None:
            out.append(dn)
            continue
        df = far.detections[j]
        out.append(RadarDetection(
            rho=(1 - w_far) * dn.rho + w_far * df.rho,
            theta=dn.theta,
            phi=dn.phi,
            v=(1 - w_far) * dn.v + w_far * df.v,
        ))
    return RadarFrame(t, out)


def time_align(radar: list, camera_timestamps, gate: float = DEFAULT_GATE) -> list:
    """Resample radar frames onto camera timestamps by linear interpolation.

    Targets present in both bracketing frames (matched within ``gate`` radians
    in azimuth and elevation) get range and velocity interpolated; angles are
    taken from the nearer frame. Unmatched targets of the nearer frame are
    copied, unmatched targets of the farther frame are dropped.
    """
    if not radar:
        raise TimeAlignmentError("no radar frames to align")
    stamps = np.array([f.timestamp for f in radar], dtype=np.float64)
    if np.any(np.diff(stamps) < 0):
        raise ValueError("radar frames must be sorted by timestamp")
    out = []
    for t in camera_timestamps:
        t = float(t)
        if t < stamps[0] or t > stamps[-1]:
            raise TimeAlignmentError(
                f"camera timestamp {t!r} outside radar coverage [{stamps[0]!r}, {stamps[-1]!r}]"
            )
        k = int(np.searchsorted(stamps, t, side="left"))
        if stamps[k] == t:
            out.append(RadarFrame(t, list(radar[k].detections)))
            continue
        out.append(_align_one(radar[k - 1], radar[k], t, gate))
    return out


def frame_to_dict(frame: RadarFrame) -> dict:
    return {
        "t": frame.timestamp,
        "detections": [
            {"rho": d.rho, "theta_deg": math.degrees(d.theta), "phi_deg": math.degrees(d.phi), "v": d.v}
            for d in frame.detections
        ],
    }


def _wrap_theta(theta: float) -> float:
    theta = math.remainder(theta, 2 * math.pi)
    return math.pi if theta <= -math.pi else theta


def frame_from_dict(rec: dict) -> RadarFrame:
    dets = [
        RadarDetection(
            rho=float(d["rho"]),
            theta=_wrap_theta(math.radians(float(d["theta_deg"]))),
            phi=min(math.pi / 2, max(-math.pi / 2, math.radians(float(d["phi_deg"])))),
            v=float(d["v"]),
        )
        for d in rec["detections"]
    ]
    return RadarFrame(float(rec["t"]), dets)


def save_frame(frame: RadarFrame, path) -> None:
    Path(path).write_text(json.dumps(frame_to_dict(frame), sort_keys=True))


def load_frame(path) -> RadarFrame:
    return frame_from_dict(json.loads(Path(path).read_text()))
