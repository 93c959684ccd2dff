"""Egocentric pinhole camera over the 2.5D world.

Renders depth and instance-id images by raycasting against extruded object
boxes, wall cells, and the floor plane.  Depth is the Euclidean distance along
the ray (not the z-coordinate); ``world_to_pixel`` reports the same quantity so
projection round trips are exact.
"""
from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import BadDimensions, FormatError, PixelOutOfBounds, PoseOutOfBounds
from .world import FLOOR_ID, Pose, Scene, WALL_ID


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    max_range: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")


DEFAULT_INTRINSICS = CameraIntrinsics(
    width=160, height=120, fx=120.0, fy=120.0, cx=79.5, cy=59.5, max_range=10.0
)

DEFAULT_CAMERA_HEIGHT = 0.6
DEFAULT_CAMERA_PITCH = math.radians(15.0)


@dataclass(frozen=True)
class Extrinsic:
    """Camera rigidly mounted on a robot: height above floor, downward pitch."""

    pose: Pose
    height: float = DEFAULT_CAMERA_HEIGHT
    pitch: float = DEFAULT_CAMERA_PITCH

    def __post_init__(self):
        if self.height <= 0:
            raise ValueError("camera height must be positive")

    def origin(self) -> np.ndarray:
        return np.array([self.pose.x, self.pose.y, self.height])

    def rotation(self) -> np.ndarray:
        """World-from-camera rotation; camera axes are (right, down, forward)."""
        ct, st = math.cos(self.pose.theta), math.sin(self.pose.theta)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        forward = (cp * ct, cp * st, -sp)
        right = (st, -ct, 0.0)
        down = (-sp * ct, -sp * st, -cp)
        return np.column_stack([right, down, forward])


@functools.lru_cache(maxsize=8)
def _camera_rays(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Unit ray directions in the camera frame, one row per pixel (row-major)."""
    us = (np.arange(intrinsics.width) - intrinsics.cx) / intrinsics.fx
    vs = (np.arange(intrinsics.height) - intrinsics.cy) / intrinsics.fy
    uu, vv = np.meshgrid(us, vs)
    dirs = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs.setflags(write=False)
    return dirs


def _ray_direction(intrinsics: CameraIntrinsics, u: float, v: float) -> np.ndarray:
    d = np.array([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0])
    return d / np.linalg.norm(d)


def _box_entry(origin: np.ndarray, dirs: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Slab-method ray/AABB entry distance per ray; +inf where the ray misses."""
    n = dirs.shape[0]
    tnear = np.full(n, -np.inf)
    tfar = np.full(n, np.inf)
    for axis in range(3):
        d = dirs[:, axis]
        o = float(origin[axis])
        lo, hi = float(box[axis]), float(box[axis + 3])
        parallel = d == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        if parallel.any():
            # Parallel rays either always satisfy this slab or never do.
            if lo <= o <= hi:
                near = np.where(parallel, -np.inf, near)
                far = np.where(parallel, np.inf, far)
            else:
                near = np.where(parallel, np.inf, near)
                far = np.where(parallel, -np.inf, far)
        tnear = np.maximum(tnear, near)
        tfar = np.minimum(tfar, far)
    hit = (tnear <= tfar) & (tnear >= 0.0)
    return np.where(hit, tnear, np.inf)


class Observation:
    """Immutable depth + instance-id render with its camera description."""

    def __init__(
        self,
        depth: np.ndarray,
        instance_ids: np.ndarray,
        intrinsics: CameraIntrinsics,
        extrinsic: Extrinsic,
        scene: Scene,
    ):
        depth = np.ascontiguousarray(depth, dtype=np.float64)
        instance_ids = np.ascontiguousarray(instance_ids, dtype=np.int32)
        expected = (intrinsics.height, intrinsics.width)
        if depth.shape != expected or instance_ids.shape != expected:
            raise BadDimensions(
                f"images must be {expected}, got {depth.shape} and {instance_ids.shape}"
            )
        depth.setflags(write=False)
        instance_ids.setflags(write=False)
        self.depth = depth
        self.instance_ids = instance_ids
        self.intrinsics = intrinsics
        self.extrinsic = extrinsic
        self.scene = scene
        self.pose = extrinsic.pose


def render(scene: Scene, extrinsic: Extrinsic, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS) -> Observation:
    """Cast one ray per pixel center; nearest surface wins, ties prefer objects."""
    if scene.grid.cell_of(extrinsic.pose.x, extrinsic.pose.y) is None:
        raise PoseOutOfBounds(f"camera pose {extrinsic.pose} outside scene bounds")
    origin = extrinsic.origin()
    dirs = _camera_rays(intrinsics) @ extrinsic.rotation().T
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    ids = np.full(n, WALL_ID, dtype=np.int32)
    boxes, box_ids = scene.render_geometry()
    for box, box_id in zip(boxes, box_ids):
        t = _box_entry(origin, dirs, box)
        closer = (t < best) & (t <= intrinsics.max_range)
        best[closer] = t[closer]
        ids[closer] = box_id
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_floor = np.where(dz < 0.0, -origin[2] / dz, np.inf)
    closer = (t_floor < best) & (t_floor <= intrinsics.max_range)
    best[closer] = t_floor[closer]
    ids[closer] = FLOOR_ID
    shape = (intrinsics.height, intrinsics.width)
    return Observation(best.reshape(shape), ids.reshape(shape), intrinsics, extrinsic, scene)


def pixel_to_world(obs: Observation, pixel: Tuple[int, int]) -> Optional[Tuple[float, float, float]]:
    """Back-project pixel (u, v) through its rendered depth; None when no hit."""
    u, v = int(pixel[0]), int(pixel[1])
    if not (0 <= u < obs.intrinsics.width and 0 <= v < obs.intrinsics.height):
        raise PixelOutOfBounds(f"pixel ({u}, {v}) outside image")
    d = obs.depth[v, u]
    if not np.isfinite(d):
        return None
    direction = obs.extrinsic.rotation() @ _ray_direction(obs.intrinsics, u, v)
    point = obs.extrinsic.origin() + d * direction
    return (float(point[0]), float(point[1]), float(point[2]))


def world_to_pixel(obs: Observation, point) -> Optional[Tuple[float, float, float]]:
    """Project a world point to continuous pixel coordinates and ray depth.

    Returns None for points behind the image plane or outside the frustum.
    """
    p = np.asarray(point, dtype=float)
    cam = obs.extrinsic.rotation().T @ (p - obs.extrinsic.origin())
    if cam[2] <= 1e-9:
        return None
    intr = obs.intrinsics
    u = intr.cx + intr.fx * cam[0] / cam[2]
    v = intr.cy + intr.fy * cam[1] / cam[2]
    if not (-0.5 <= u <= intr.width - 0.5 and -0.5 <= v <= intr.height - 0.5):
        return None
    return (float(u), float(v), float(np.linalg.norm(cam)))


@dataclass(frozen=True)
class DeviationBounds:
    """Absolute worst-case bounds on the mount parameters, all >= 0."""

    yaw: float = 0.0
    pitch: float = 0.0
    height: float = 0.0
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self):
        if min(self.yaw, self.pitch, self.height, self.x, self.y) < 0:
            raise ValueError("deviation bounds must be >= 0")


def extrinsic_error_bound(extrinsic: Extrinsic, deviations: DeviationBounds, depth: float) -> float:
    """First-order worst-case shift of the optical-axis point at a given depth.

    Sums |d p / d theta_i| * |delta_i| over {yaw, pitch, height, x, y}; absolute
    values make independent errors add instead of cancel.
    """
    if depth <= 0:
        raise ValueError("depth must be positive")
    return (
        depth * abs(math.cos(extrinsic.pitch)) * deviations.yaw
        + depth * deviations.pitch
        + deviations.height
        + deviations.x
        + deviations.y
    )


def optical_axis_point(extrinsic: Extrinsic, depth: float) -> np.ndarray:
    """World point a given ray distance ahead along the optical axis."""
    forward = extrinsic.rotation()[:, 2]
    return extrinsic.origin() + depth * forward


# ---------------------------------------------------------------------------
# Binary image files: DPT1 (float32 depth) and SEG1 (int32 instance ids).
# ---------------------------------------------------------------------------

_DEPTH_MAGIC = b"DPT1"
_SEG_MAGIC = b"SEG1"


def _write_image(path: Path | str, magic: bytes, array: np.ndarray, dtype: str) -> None:
    arr = np.ascontiguousarray(array, dtype=dtype)
    if arr.ndim != 2:
        raise BadDimensions("image must be 2D")
    h, w = arr.shape
    Path(path).write_bytes(magic + struct.pack("<II", h, w) + arr.tobytes())


def _read_image(path: Path | str, magic: bytes, dtype: str, itemsize: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    h, w = struct.unpack("<II", blob[4:12])
    if h == 0 or w == 0:
        raise BadDimensions("image dimensions must be positive")
    expected = 12 + h * w * itemsize
    if len(blob) != expected:
        raise FormatError(f"payload length {len(blob)} != expected {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=12).reshape(h, w).copy()


def save_depth(path: Path | str, depth: np.ndarray) -> None:
    _write_image(path, _DEPTH_MAGIC, depth, "<f4")


def load_depth(path: Path | str) -> np.ndarray:
    return _read_image(path, _DEPTH_MAGIC, "<f4", 4)


def save_instances(path: Path | str, instance_ids: np.ndarray) -> None:
    _write_image(path, _SEG_MAGIC, instance_ids, "<i4")


def load_instances(path: Path | str) -> np.ndarray:
    return _read_image(path, _SEG_MAGIC, "<i4", 4)
