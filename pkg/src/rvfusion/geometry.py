"""Radar polar coordinates -> world -> camera -> pixel plane.

Frames:
    radar   x along boresight, y left, z up; azimuth measured from x toward y,
            elevation from the x-y plane toward z.
    world   right-handed, z up.
    camera  optical convention: z along the optical axis, x right, y down.

Poses in rig files describe a body frame (x forward, y left, z up) placed in
the world by position + yaw/pitch/roll (Z-Y-X order).  For the camera the
optical frame is obtained from its body frame by a fixed axis permutation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "RadarDetection",
    "RigidTransform",
    "CameraIntrinsics",
    "SensorRig",
    "ProjectionResult",
    "rotation_from_ypr",
    "polar_to_cartesian",
    "world_from_radar",
    "camera_from_world",
    "pixel_from_camera",
    "project_radar_to_pixel",
    "project_points",
    "load_rig",
    "RigFileError",
    "rig_from_dict",
    "rig_to_dict",
]

MIN_DEPTH = 1e-12
ORTHO_TOL = 1e-9

# body (x fwd, y left, z up) -> optical (x right, y down, z fwd)
OPTICAL_FROM_BODY = np.array(
    [[0.0, -1.0, 0.0],
     [0.0, 0.0, -1.0],
     [1.0, 0.0, 0.0]]
)


@dataclass(frozen=True)
class RadarDetection:
    """One radar return. Angles in radians, v > 0 when receding."""

    rho: float
    theta: float
    phi: float
    v: float = 0.0

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if not (-math.pi < self.theta <= math.pi):
            raise ValueError(f"theta must lie in (-pi, pi], got {self.theta}")
        if not (-math.pi / 2 <= self.phi <= math.pi / 2):
            raise ValueError(f"phi must lie in [-pi/2, pi/2], got {self.phi}")


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(rot.T @ rot - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, p) -> np.ndarray:
        """Transform points of shape (3,) or (n, 3)."""
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """Return self ∘ inner (apply ``inner`` first)."""
        return RigidTransform(
            self.rotation @ inner.rotation,
            self.rotation @ inner.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    dx: float
    dy: float
    x_p0: float
    y_p0: float
    width: int
    height: int

    def __post_init__(self):
        if self.f <= 0 or self.dx <= 0 or self.dy <= 0:
            raise ValueError("f, dx and dy must be positive")
        if not (0 <= self.x_p0 < self.width and 0 <= self.y_p0 < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def fx(self) -> float:
        return self.f / self.dx

    @property
    def fy(self) -> float:
        return self.f / self.dy

    def matrix(self) -> np.ndarray:
        """3x3 pixel-from-camera matrix (M1 times the focal projection)."""
        return np.array(
            [[self.fx, 0.0, self.x_p0],
             [0.0, self.fy, self.y_p0],
             [0.0, 0.0, 1.0]]
        )

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Same field of view on a resized image."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            f=self.f,
            dx=self.dx / sx,
            dy=self.dy / sy,
            x_p0=self.x_p0 * sx,
            y_p0=self.y_p0 * sy,
            width=width,
            height=height,
        )


@dataclass(frozen=True)
class SensorRig:
    radar_to_world: RigidTransform
    world_to_camera: RigidTransform
    intrinsics: CameraIntrinsics

    def radar_to_camera(self) -> RigidTransform:
        return self.world_to_camera.compose(self.radar_to_world)

    def camera_to_world(self) -> RigidTransform:
        return self.world_to_camera.inverse()


@dataclass(frozen=True)
class ProjectionResult:
    x_p: float
    y_p: float
    z_c: float
    in_frame: bool


def rotation_from_ypr(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rz(yaw) @ Ry(pitch) @ Rx(roll), radians."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


def polar_to_cartesian(det: RadarDetection) -> np.ndarray:
    ct, st = math.cos(det.theta), math.sin(det.theta)
    cp, sp = math.cos(det.phi), math.sin(det.phi)
    return np.array([det.rho * ct * cp, det.rho * st * cp, det.rho * sp])


def world_from_radar(p, rig: SensorRig) -> np.ndarray:
    return rig.radar_to_world.apply(p)


def camera_from_world(p, rig: SensorRig) -> np.ndarray:
    return rig.world_to_camera.apply(p)


def pixel_from_camera(p_c, K: CameraIntrinsics) -> ProjectionResult:
    x_c, y_c, z_c = (float(c) for c in p_c)
    if z_c <= 0 or abs(z_c) < MIN_DEPTH:
        return ProjectionResult(0.0, 0.0, z_c, False)
    x_p = K.fx * (x_c / z_c) + K.x_p0
    y_p = K.fy * (y_c / z_c) + K.y_p0
    in_frame = 0 <= x_p < K.width and 0 <= y_p < K.height
    return ProjectionResult(x_p, y_p, z_c, in_frame)


def project_radar_to_pixel(det: RadarDetection, rig: SensorRig) -> ProjectionResult:
    p_r = polar_to_cartesian(det)
    p_w = world_from_radar(p_r, rig)
    p_c = camera_from_world(p_w, rig)
    return pixel_from_camera(p_c, rig.intrinsics)


def project_points(points_world, rig: SensorRig):
    """Vectorized world -> pixel projection.

    Returns (uv, z) where uv is (n, 2) and z is the camera depth; rows with
    non-positive depth carry NaN pixel coordinates.
    """
    p_c = rig.world_to_camera.apply(np.atleast_2d(points_world))
    z = p_c[:, 2]
    uv = np.full((len(p_c), 2), np.nan)
    ok = z > MIN_DEPTH
    K = rig.intrinsics
    uv[ok, 0] = K.fx * (p_c[ok, 0] / z[ok]) + K.x_p0
    uv[ok, 1] = K.fy * (p_c[ok, 1] / z[ok]) + K.y_p0
    return uv, z


def _pose_transform(pose: dict) -> RigidTransform:
    yaw, pitch, roll = (math.radians(a) for a in pose.get("ypr_deg", (0.0, 0.0, 0.0)))
    return RigidTransform(rotation_from_ypr(yaw, pitch, roll), pose.get("position", (0.0, 0.0, 0.0)))


def rig_from_dict(cfg: dict) -> SensorRig:
    """Build a rig from the JSON layout used by rig files.

    ``radar_pose`` is the radar body frame in the world; ``camera_pose`` is the
    camera body frame in the world, converted here to the world->optical
    transform.
    """
    radar_to_world = _pose_transform(cfg["radar_pose"])
    cam_body_to_world = _pose_transform(cfg["camera_pose"])
    optical = RigidTransform(OPTICAL_FROM_BODY, np.zeros(3))
    world_to_camera = optical.compose(cam_body_to_world.inverse())
    k = cfg["intrinsics"]
    intr = CameraIntrinsics(
        f=float(k["f"]),
        dx=float(k["dx"]),
        dy=float(k["dy"]),
        x_p0=float(k["x_p0"]),
        y_p0=float(k["y_p0"]),
        width=int(k["width"]),
        height=int(k["height"]),
    )
    return SensorRig(radar_to_world, world_to_camera, intr)


def rig_to_dict(rig: SensorRig) -> dict:
    """Inverse of :func:`rig_from_dict` (poses re-expressed as yaw/pitch/roll)."""

    def ypr(rot):
        pitch = math.asin(max(-1.0, min(1.0, -rot[2, 0])))
        yaw = math.atan2(rot[1, 0], rot[0, 0])
        roll = math.atan2(rot[2, 1], rot[2, 2])
        return [math.degrees(yaw), math.degrees(pitch), math.degrees(roll)]

    cam_body_to_world = rig.world_to_camera.inverse().compose(
        RigidTransform(OPTICAL_FROM_BODY, np.zeros(3))
    )
    k = rig.intrinsics
    return {
        "radar_pose": {
            "position": rig.radar_to_world.translation.tolist(),
            "ypr_deg": ypr(rig.radar_to_world.rotation),
        },
        "camera_pose": {
            "position": cam_body_to_world.translation.tolist(),
            "ypr_deg": ypr(cam_body_to_world.rotation),
        },
        "intrinsics": {
            "f": k.f, "dx": k.dx, "dy": k.dy, "x_p0": k.x_p0, "y_p0": k.y_p0,
            "width": k.width, "height": k.height,
        },
    }


class RigFileError(ValueError):
    """Missing or malformed rig file."""


def load_rig(path) -> SensorRig:
    try:
        with open(Path(path)) as fh:
            return rig_from_dict(json.load(fh))
    except FileNotFoundError as exc:
        raise RigFileError(f"rig file not found: {path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise RigFileError(f"malformed rig file {path}: {exc!r}") from exc
