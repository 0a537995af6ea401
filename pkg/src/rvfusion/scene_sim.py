"""Deterministic synthetic intersection scenes with paired camera/radar output.

Vehicles are cuboids on the ground plane (z = 0). The camera image is flat
shaded: each visible vehicle is painted as its projected bounding rectangle
over a gray background, far vehicles first.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import RadarDetection, SensorRig, rig_from_dict, rig_to_dict
from .boxes import iou_matrix
from .radar_imaging import RadarFrame, render_radar_frame, save_frame

SPLITS = ("train", "val", "test")
SPLIT_RATIO = (Fraction(55, 10), Fraction(25, 10), Fraction(2))
BACKGROUND = 128
BOX_GRID = 64
CATEGORY = {"id": 1, "name": "vehicle"}

VEHICLE_TYPES = (
    # (length, width, height), sampling weight
    ((4.5, 1.8, 1.5), 0.6),
    ((5.5, 2.0, 2.2), 0.25),
    ((8.0, 2.5, 3.2), 0.15),
)
PALETTE = np.array([
    [220, 40, 40], [40, 90, 220], [240, 200, 30], [30, 170, 70],
    [240, 240, 240], [20, 20, 20], [200, 90, 200], [250, 130, 20],
], dtype=np.int64)


@dataclass(frozen=True)
class Vehicle:
    id: int
    center: tuple
    extent: tuple
    heading: float = 0.0
    speed: float = 0.0
    color: tuple = (220, 40, 40)

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise ValueError(f"vehicle {self.id}: extent must be positive, got {self.extent}")
        if self.speed < 0:
            raise ValueError(f"vehicle {self.id}: speed must be >= 0")

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading), 0.0])

    def corners(self) -> np.ndarray:
        """8 world-frame cuboid corners."""
        length, width, height = self.extent
        c, s = math.cos(self.heading), math.sin(self.heading)
        local = np.array([[sx * length / 2, sy * width / 2, sz * height / 2]
                          for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ rot.T + np.asarray(self.center, dtype=np.float64)


@dataclass(frozen=True)
class Scene:
    vehicles: tuple
    rig: SensorRig
    time: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        ids = [v.id for v in self.vehicles]
        if len(ids) != len(set(ids)):
            raise ValueError("vehicle ids must be unique")


@dataclass(frozen=True)
class RadarNoiseModel:
    sigma_rho: float = 0.1
    sigma_theta: float = math.radians(0.3)
    sigma_v: float = 0.1
    dropout_p: float = 0.1
    ghost_rate: float = 1.0
    points_per_vehicle: int = 8
    max_range: float = 80.0
    fov_azimuth: float = math.radians(120.0)
    fov_elevation: float = math.radians(20.0)

    def __post_init__(self):
        if min(self.sigma_rho, self.sigma_theta, self.sigma_v) < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0 <= self.dropout_p <= 1:
            raise ValueError("dropout_p must be a probability")
        if self.ghost_rate < 0:
            raise ValueError("ghost_rate must be >= 0")
        if self.points_per_vehicle < 1:
            raise ValueError("points_per_vehicle must be >= 1")

    @classmethod
    def zero(cls, points_per_vehicle: int = 8) -> "RadarNoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, points_per_vehicle)


def default_rig_dict(image_size: int = 1080) -> dict:
    """Pole-mounted camera 6 m up pitched 12 degrees down, radar just below it."""
    fx = 1000.0 * image_size / 1080.0
    f = 0.004
    return {
        "camera_pose": {"position": [0.0, 0.0, 6.0], "ypr_deg": [0.0, 12.0, 0.0]},
        "radar_pose": {"position": [0.0, 0.0, 5.5], "ypr_deg": [0.0, 8.0, 0.0]},
        "intrinsics": {
            "f": f, "dx": f / fx, "dy": f / fx,
            "x_p0": image_size / 2.0, "y_p0": image_size / 2.0,
            "width": image_size, "height": image_size,
        },
    }


@dataclass
class SimConfig:
    image_size: int = 1080
    rig: dict | None = None
    min_vehicles: int = 1
    max_vehicles: int = 4
    min_distance: float = 12.0
    max_distance: float = 40.0
    lateral_fraction: float = 0.8
    max_speed: float = 15.0
    max_overlap_iou: float = 0.2
    min_box_px: float = 4.0
    sensor_tick: float = 0.05
    splat_radius: int = 2
    noise: dict = field(default_factory=lambda: asdict(RadarNoiseModel()))

    def rig_dict(self) -> dict:
        return self.rig if self.rig is not None else default_rig_dict(self.image_size)

    def sensor_rig(self) -> SensorRig:
        return rig_from_dict(self.rig_dict())

    def noise_model(self) -> RadarNoiseModel:
        return RadarNoiseModel(**self.noise)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rig"] = self.rig_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        cfg = cls(**{k: v for k, v in d.items() if k in known})
        noise = asdict(RadarNoiseModel())
        noise.update(cfg.noise or {})
        cfg.noise = noise
        return cfg


@dataclass
class DatasetManifest:
    seed: int
    n_frames: int
    counts: dict
    splits: dict
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)


# -- kinematics -------------------------------------------------------------------------------

def step_scene(scene: Scene, dt: float) -> Scene:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    moved = tuple(
        replace(v, center=tuple(float(c) for c in np.asarray(v.center, dtype=np.float64) + v.velocity * dt))
        for v in scene.vehicles
    )
    return replace(scene, vehicles=moved, time=scene.time + dt)


# -- rendering --------------------------------------------------------------------------------

_EDGES = [(i, j) for i in range(8) for j in range(i + 1, 8) if bin(i ^ j).count("1") == 1]


def vehicle_box(vehicle: Vehicle, rig: SensorRig, near: float = 1e-3):
    """Unclipped pixel hull (x1, y1, x2, y2) and mean depth, or None when fully behind the camera.

    Cuboid edges crossing the near plane are cut there so partly visible
    vehicles still get a well-defined hull.
    """
    p_c = rig.world_to_camera.apply(vehicle.corners())
    z = p_c[:, 2]
    front = z > near
    if not front.any():
        return None
    pts = [p_c[front]]
    for i, j in _EDGES:
        if front[i] != front[j]:
            t = (near - z[i]) / (z[j] - z[i])
            pts.append((p_c[i] + t * (p_c[j] - p_c[i]))[None, :])
    pts = np.concatenate(pts)
    k = rig.intrinsics
    u = k.fx * pts[:, 0] / pts[:, 2] + k.x_p0
    v = k.fy * pts[:, 1] / pts[:, 2] + k.y_p0
    return (float(u.min()), float(v.min()), float(u.max()), float(v.max())), float(z[front].mean())


def _clip_box(box, width, height):
    x1, y1, x2, y2 = box
    x1, x2 = max(0.0, x1), min(float(width), x2)
    y1, y2 = max(0.0, y1), min(float(height), y2)
    # dyadic grid keeps x + w == x2 exact after an xywh round trip
    x1, y1, x2, y2 = (round(c * BOX_GRID) / BOX_GRID for c in (x1, y1, x2, y2))
    if x2 <= x1 or y2 <= y1:
        return None
    return (x1, y1, x2, y2)


def box_pixels(box):
    """Integer pixel span [c0, c1) x [r0, r1) covered by a continuous box."""
    x1, y1, x2, y2 = box
    return int(math.floor(x1)), int(math.floor(y1)), int(math.ceil(x2)), int(math.ceil(y2))


def render_vision(scene: Scene):
    """Flat-shaded camera image and GT boxes as a list of (vehicle id, (x1, y1, x2, y2))."""
    k = scene.rig.intrinsics
    image = np.full((k.height, k.width, 3), BACKGROUND, dtype=np.uint8)
    visible = []
    for v in scene.vehicles:
        res = vehicle_box(v, scene.rig)
        if res is None:
            continue
        box, depth = res
        clipped = _clip_box(box, k.width, k.height)
        if clipped is None:
            continue
        visible.append((depth, v, clipped))
    # far first so nearer vehicles overwrite
    visible.sort(key=lambda item: -item[0])
    for _, v, box in visible:
        c0, r0, c1, r1 = box_pixels(box)
        image[r0:r1, c0:c1] = np.asarray(v.color, dtype=np.uint8)
    boxes = [(v.id, box) for _, v, box in sorted(visible, key=lambda item: item[1].id)]
    return image, boxes


# -- radar ---------------------------------------------------------------------------------------

def _rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *keys]))


def _time_key(t: float) -> int:
    return int(round(t * 1e6)) & 0xFFFFFFFFFFFFFFFF


def _facing_face(vehicle: Vehicle, radar_pos: np.ndarray):
    """Centre, in-plane unit axis, half-width and normal of the vertical face most facing the radar."""
    length, width, height = vehicle.extent
    c, s = math.cos(vehicle.heading), math.sin(vehicle.heading)
    fwd = np.array([c, s, 0.0])
    left = np.array([-s, c, 0.0])
    center = np.asarray(vehicle.center, dtype=np.float64)
    faces = [
        (fwd, left, length / 2, width / 2),
        (-fwd, left, length / 2, width / 2),
        (left, fwd, width / 2, length / 2),
        (-left, fwd, width / 2, length / 2),
    ]
    best = None
    for normal, axis, offset, half in faces:
        fc = center + normal * offset
        to_radar = radar_pos - fc
        score = float(normal @ to_radar) / (np.linalg.norm(to_radar) + 1e-12)
        if best is None or score > best[0]:
            best = (score, fc, axis, half, normal)
    return best[1], best[2], best[3], height


def _to_polar(p_r: np.ndarray):
    rho = np.linalg.norm(p_r, axis=-1)
    theta = np.arctan2(p_r[..., 1], p_r[..., 0])
    phi = np.arcsin(np.clip(p_r[..., 2] / np.maximum(rho, 1e-12), -1.0, 1.0))
    return rho, theta, phi


def _wrap(theta):
    theta = math.remainder(theta, 2 * math.pi)
    return math.pi if theta <= -math.pi else theta


def sample_radar(scene: Scene, noise: RadarNoiseModel) -> RadarFrame:
    """Noisy radar returns from each vehicle's radar-facing side, plus ghosts.

    Deterministic in (scene.rng_seed, scene.time).
    """
    rng = _rng(scene.rng_seed, _time_key(scene.time), 0x5241)
    world_to_radar = scene.rig.radar_to_world.inverse()
    radar_pos = scene.rig.radar_to_world.translation
    dets = []
    for v in scene.vehicles:
        fc, axis, half, height = _facing_face(v, radar_pos)
        n = noise.points_per_vehicle
        u = rng.uniform(-half, half, n)
        h = rng.uniform(-height / 2, height / 2, n)
        pts = fc[None, :] + u[:, None] * axis[None, :] + h[:, None] * np.array([0.0, 0.0, 1.0])
        rel = pts - radar_pos
        radial = rel / np.linalg.norm(rel, axis=1, keepdims=True)
        vel = radial @ v.velocity
        rho, theta, phi = _to_polar(world_to_radar.apply(pts))
        rho = rho + rng.normal(0.0, noise.sigma_rho, n) if noise.sigma_rho else rho
        theta = theta + rng.normal(0.0, noise.sigma_theta, n) if noise.sigma_theta else theta
        phi = phi + rng.normal(0.0, noise.sigma_theta, n) if noise.sigma_theta else phi
        vel = vel + rng.normal(0.0, noise.sigma_v, n) if noise.sigma_v else vel
        keep = rng.random(n) >= noise.dropout_p
        for i in np.flatnonzero(keep):
            dets.append(RadarDetection(
                rho=max(0.0, float(rho[i])),
                theta=_wrap(float(theta[i])),
                phi=float(np.clip(phi[i], -math.pi / 2, math.pi / 2)),
                v=float(vel[i]),
            ))
    for _ in range(int(rng.poisson(noise.ghost_rate)) if noise.ghost_rate > 0 else 0):
        dets.append(RadarDetection(
            rho=float(rng.uniform(2.0, noise.max_range)),
            theta=float(rng.uniform(-noise.fov_azimuth / 2, noise.fov_azimuth / 2)),
            phi=float(rng.uniform(-noise.fov_elevation / 2, noise.fov_elevation / 2)),
            v=float(rng.uniform(-15.0, 15.0)),
        ))
    return RadarFrame(scene.time, dets)


# -- scene sampling --------------------------------------------------------------------------------

def sample_scene(cfg: SimConfig, seed: int, frame_index: int, rig: SensorRig | None = None,
                 time: float | None = None) -> Scene:
    """Random, mostly non-overlapping vehicles fully inside the camera view."""
    rig = rig if rig is not None else cfg.sensor_rig()
    rng = _rng(seed, frame_index, 0x5343)
    k = rig.intrinsics
    fov = math.atan2(k.width / 2.0, k.fx)
    target = int(rng.integers(cfg.min_vehicles, cfg.max_vehicles + 1))
    cam_pos = rig.camera_to_world().translation
    types = [t for t, _ in VEHICLE_TYPES]
    weights = np.array([w for _, w in VEHICLE_TYPES])
    vehicles, boxes = [], []
    attempts = 0
    while len(vehicles) < target and attempts < 200:
        attempts += 1
        dist = rng.uniform(cfg.min_distance, cfg.max_distance)
        lateral = rng.uniform(-1, 1) * dist * math.tan(fov) * cfg.lateral_fraction
        extent = types[int(rng.choice(len(types), p=weights / weights.sum()))]
        heading = float(rng.integers(0, 4)) * math.pi / 2 + rng.normal(0, math.radians(5))
        speed = float(rng.uniform(0, cfg.max_speed)) if rng.random() < 0.8 else 0.0
        color = tuple(int(c) for c in PALETTE[int(rng.integers(len(PALETTE)))])
        center = (cam_pos[0] + dist, cam_pos[1] + lateral, extent[2] / 2)
        v = Vehicle(len(vehicles) + 1, center, extent, _wrap(heading), speed, color)
        res = vehicle_box(v, rig)
        if res is None:
            continue
        box = res[0]
        if box[0] < 0 or box[1] < 0 or box[2] > k.width or box[3] > k.height:
            continue
        if min(box[2] - box[0], box[3] - box[1]) < cfg.min_box_px:
            continue
        if boxes and iou_matrix([box], boxes).max() > cfg.max_overlap_iou:
            continue
        vehicles.append(v)
        boxes.append(box)
    t = frame_index * cfg.sensor_tick if time is None else time
    return Scene(tuple(vehicles), rig, t, seed)


def simulate_sequence(cfg: SimConfig, seed: int, duration: float, camera_hz: float = 20.0,
                      radar_hz: float = 13.0):
    """Asynchronous capture of one moving scene.

    Returns (camera_timestamps, radar_frames, scene_at) where ``scene_at(t)``
    gives the ground-truth scene at any time.
    """
    rig = cfg.sensor_rig()
    base = sample_scene(cfg, seed, 0, rig, time=0.0)
    noise = cfg.noise_model()

    def scene_at(t: float) -> Scene:
        return base if t == 0 else step_scene(base, t)

    radar_times = np.arange(0.0, duration + 1e-9, 1.0 / radar_hz)
    cam_times = np.arange(0.0, radar_times[-1] + 1e-9, 1.0 / camera_hz)
    frames = [sample_radar(scene_at(float(t)), noise) for t in radar_times]
    return cam_times.tolist(), frames, scene_at


# -- dataset emission ------------------------------------------------------------------------------

def split_sizes(n: int) -> tuple:
    """Largest-remainder partition of n by 5.5 : 2.5 : 2 (ties favour the earlier split)."""
    total = sum(SPLIT_RATIO)
    quotas = [Fraction(n) * r / total for r in SPLIT_RATIO]
    sizes = [int(math.floor(q)) for q in quotas]
    rest = n - sum(sizes)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return tuple(sizes)


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RVF_THREADS", "1")))
    except ValueError:
        return 1


def generate_frame(cfg: SimConfig, seed: int, index: int, rig: SensorRig | None = None):
    """One synchronized capture: (scene, vision image, boxes, radar frame, radar image)."""
    rig = rig if rig is not None else cfg.sensor_rig()
    scene = sample_scene(cfg, seed, index, rig)
    image, boxes = render_vision(scene)
    radar = sample_radar(scene, cfg.noise_model())
    radar_img = render_radar_frame(radar, rig, splat_radius=cfg.splat_radius)
    return scene, image, boxes, radar, radar_img


def emit_dataset(cfg: SimConfig, n_frames: int, out_dir, seed: int = 0) -> DatasetManifest:
    """Write a split dataset; output bytes depend only on (cfg, n_frames, seed)."""
    if n_frames < 10:
        raise ValueError(f"n_frames must be >= 10, got {n_frames}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            for sub in ("vision", "radar_png", "radar_raw"):
                (out / split / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc

    sizes = split_sizes(n_frames)
    perm = _rng(seed, 0x53504C).permutation(n_frames)
    assignment = {}
    start = 0
    for split, size in zip(SPLITS, sizes):
        for idx in sorted(int(i) for i in perm[start:start + size]):
            assignment[idx] = split
        start += size

    rig = cfg.sensor_rig()

    def work(index):
        _, image, boxes, radar, radar_img = generate_frame(cfg, seed, index, rig)
        split = assignment[index]
        stem = f"frame_{index:06d}"
        Image.fromarray(image).save(out / split / "vision" / f"{stem}.png")
        Image.fromarray(radar_img).save(out / split / "radar_png" / f"{stem}.png")
        save_frame(radar, out / split / "radar_raw" / f"{stem}.json")
        return index, boxes

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, range(n_frames)))
    else:
        results = [work(i) for i in range(n_frames)]
    boxes_by_frame = dict(results)

    from .data import write_annotations
    k = rig.intrinsics
    split_ids = {}
    for split in SPLITS:
        ids = sorted(i for i, s in assignment.items() if s == split)
        split_ids[split] = ids
        write_annotations(
            out / f"annotations_{split}.json",
            [(i, f"{split}/vision/frame_{i:06d}.png", k.width, k.height, [b for _, b in boxes_by_frame[i]])
             for i in ids],
        )
    (out / "rig.json").write_text(json.dumps(rig_to_dict(rig), indent=2, sort_keys=True))
    manifest = DatasetManifest(seed, n_frames, dict(zip(SPLITS, sizes)), split_ids, cfg.to_dict())
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return manifest
