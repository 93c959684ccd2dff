"""Heatmap type, ground-truth generation, resampling, and peak extraction.

Two heatmap kinds share one container: "nav" maps score where the robot should
stand (distance ramp toward the target, zero off traversable floor), "fac" maps
where it should look (Gaussian bump over the facing target's mask center).
Negative samples are all-zero maps of either kind.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import BadDimensions, BadHeatmap, FormatError, UnknownInstance
from .sensor import CameraIntrinsics, Observation, render
from .world import FLOOR_ID, ObjectInstance

NAV = "nav"
FAC = "fac"

_KIND_CODES = {NAV: 0, FAC: 1}
_CODE_KINDS = {0: NAV, 1: FAC}


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (height, width) float32 in [0, 1]
    kind: str

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 2 or values.size == 0:
            raise BadDimensions("heatmap must be 2D and non-empty")
        if not ((values >= 0.0) & (values <= 1.0)).all():
            raise BadHeatmap("heatmap values must lie in [0, 1]")
        if self.kind not in _KIND_CODES:
            raise ValueError(f"kind must be one of {sorted(_KIND_CODES)}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def is_negative(self) -> bool:
        return not self.values.any()


@dataclass(frozen=True)
class NavGtParams:
    """Ramp parameters for standpoint ground truth.

    clearance keeps labeled standpoints away from obstacles so they remain
    traversable after any embodiment's footprint inflation downstream.
    """

    cutoff_radius: float = 3.0
    distance_mode: str = "euclidean_to_object"
    clearance: float = 0.4

    def __post_init__(self):
        if self.cutoff_radius <= 0:
            raise ValueError("cutoff_radius must be > 0")
        if self.distance_mode not in ("euclidean_to_object", "geodesic_to_standpoint"):
            raise ValueError(f"unknown distance_mode {self.distance_mode!r}")
        if self.clearance < 0:
            raise ValueError("clearance must be >= 0")


@dataclass(frozen=True)
class FacGtParams:
    sigma_floor: float = 2.0
    sigma_scale: float = 0.25

    def __post_init__(self):
        if self.sigma_floor <= 0 or self.sigma_scale <= 0:
            raise ValueError("sigma parameters must be > 0")


def _zero(obs_like_shape: Tuple[int, int], kind: str) -> Heatmap:
    return Heatmap(np.zeros(obs_like_shape, dtype=np.float32), kind)


def _check_instance(obs: Observation, instance: ObjectInstance) -> None:
    if not obs.scene.has_object(instance.id) or obs.scene.object_by_id(instance.id) != instance:
        raise UnknownInstance(f"instance {instance.id} does not belong to the observed scene")


def _backproject_all(obs: Observation) -> Tuple[np.ndarray, np.ndarray]:
    """World (x, y) of every pixel's hit point; NaN where depth is infinite."""
    from .sensor import _camera_rays

    dirs = _camera_rays(obs.intrinsics) @ obs.extrinsic.rotation().T
    origin = obs.extrinsic.origin()
    depth = obs.depth.reshape(-1)
    with np.errstate(invalid="ignore"):
        pts = origin[None, :2] + depth[:, None] * dirs[:, :2]
    shape = obs.depth.shape
    return pts[:, 0].reshape(shape), pts[:, 1].reshape(shape)


def _standpoint_mask(obs: Observation, clearance: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Floor pixels whose hit cell is free with at least `clearance` to obstacles.

    Returns (mask, rows, cols) where rows/cols are the grid cells of every
    pixel (is only valid where mask holds).
    """
    grid = obs.scene.grid
    xs, ys = _backproject_all(obs)
    floor = obs.instance_ids == FLOOR_ID
    with np.errstate(invalid="ignore"):
        cols = np.floor((xs - grid.origin[0]) / grid.resolution)
        rows = np.floor((ys - grid.origin[1]) / grid.resolution)
    inb = floor & (cols >= 0) & (cols < grid.width) & (rows >= 0) & (rows < grid.height)
    cols_i = np.where(inb, cols, 0).astype(np.int64)
    rows_i = np.where(inb, rows, 0).astype(np.int64)
    free = inb & ~grid.occ[rows_i, cols_i]
    if clearance > 0:
        free &= grid.obstacle_distance()[rows_i, cols_i] >= clearance
    return free, rows_i, cols_i


def _geodesic_standpoint_field(obs: Observation, target: ObjectInstance) -> Optional[np.ndarray]:
    """Path distance from each free cell to the ring of cells beside the target."""
    from .world import geodesic_field

    grid = obs.scene.grid
    ys = grid.origin[1] + (np.arange(grid.height) + 0.5) * grid.resolution
    xs = grid.origin[0] + (np.arange(grid.width) + 0.5) * grid.resolution
    xx, yy = np.meshgrid(xs, ys)
    xmin, ymin, xmax, ymax = target.footprint
    dx = np.maximum(np.maximum(xmin - xx, 0.0), xx - xmax)
    dy = np.maximum(np.maximum(ymin - yy, 0.0), yy - ymax)
    ring = ~grid.occ & (np.hypot(dx, dy) <= grid.resolution * math.sqrt(2.0) + 1e-9)
    sources = [tuple(c) for c in np.argwhere(ring)]
    if not sources:
        return None
    return geodesic_field(grid, sources)


def gen_nav_gt(obs: Observation, target: Optional[ObjectInstance], params: NavGtParams = NavGtParams()) -> Heatmap:
    """Distance-ramp ground truth over visible traversable floor near the target.

    Pixels ramp affinely from 1 at the closest qualifying standpoint down to 0
    at the cutoff radius; everything else (non-floor, blocked, too far, or a
    negative sample with no visible target) is exactly 0.
    """
    shape = obs.depth.shape
    if target is None:
        return _zero(shape, NAV)
    _check_instance(obs, target)
    mask, rows, cols = _standpoint_mask(obs, params.clearance)
    if not mask.any():
        return _zero(shape, NAV)
    xs, ys = _backproject_all(obs)
    r = params.cutoff_radius
    if params.distance_mode == "euclidean_to_object":
        xmin, ymin, xmax, ymax = target.footprint
        dx = np.maximum(np.maximum(xmin - xs, 0.0), xs - xmax)
        dy = np.maximum(np.maximum(ymin - ys, 0.0), ys - ymax)
        with np.errstate(invalid="ignore"):
            d = np.hypot(dx, dy)
    else:
        field = _geodesic_standpoint_field(obs, target)
        if field is None:
            return _zero(shape, NAV)
        d = field[rows, cols]
    with np.errstate(invalid="ignore"):
        qualifying = mask & (d < r)
    if not qualifying.any():
        return _zero(shape, NAV)
    d_min = d[qualifying].min()
    values = np.zeros(shape, dtype=np.float64)
    values[mask] = np.clip((r - d[mask]) / (r - d_min), 0.0, 1.0)
    return Heatmap(values.astype(np.float32), NAV)


def gen_fac_gt(obs: Observation, facing: Optional[ObjectInstance], params: FacGtParams = FacGtParams()) -> Heatmap:
    """Gaussian bump centered on the facing target's visible mask.

    Sigma grows with the square root of the mask area so near, large objects
    get broader peaks; the center pixel is exactly 1.
    """
    shape = obs.depth.shape
    if facing is None:
        return _zero(shape, FAC)
    _check_instance(obs, facing)
    mask = obs.instance_ids == facing.id
    count = int(mask.sum())
    if count == 0:
        return _zero(shape, FAC)
    vs, us = np.nonzero(mask)
    u0 = int(math.floor(us.mean() + 0.5))
    v0 = int(math.floor(vs.mean() + 0.5))
    sigma = max(params.sigma_floor, params.sigma_scale * math.sqrt(count))
    uu, vv = np.meshgrid(np.arange(shape[1]), np.arange(shape[0]))
    sq = (uu - u0) ** 2 + (vv - v0) ** 2
    values = np.exp(-sq / (2.0 * sigma * sigma))
    values[v0, u0] = 1.0
    return Heatmap(values.astype(np.float32), FAC)


def _overlap_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging n_in samples into n_out bins exactly."""
    # Entry (i, j) is the fraction of output bin i covered by input bin j.
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo = i * scale
        hi = (i + 1) * scale
        j0 = int(math.floor(lo))
        j1 = min(int(math.ceil(hi)), n_in)
        for j in range(j0, j1):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / scale


def downsample_nav(h: Heatmap, out_w: int, out_h: int) -> Heatmap:
    """Exact area-average pooling to a smaller raster."""
    if out_w <= 0 or out_h <= 0 or out_w > h.width or out_h > h.height:
        raise BadDimensions(
            f"output {out_w}x{out_h} must be positive and at most {h.width}x{h.height}"
        )
    wy = _overlap_matrix(h.height, out_h)
    wx = _overlap_matrix(h.width, out_w)
    out = wy @ h.values.astype(np.float64) @ wx.T
    return Heatmap(np.clip(out, 0.0, 1.0).astype(np.float32), h.kind)


def rerender_fac(
    obs: Observation,
    facing: Optional[ObjectInstance],
    params: FacGtParams,
    out_w: int,
    out_h: int,
) -> Heatmap:
    """Facing ground truth rendered directly at a lower resolution.

    Re-renders the scene with proportionally scaled intrinsics and applies the
    same Gaussian law, so the peak stays exactly 1 at the scaled mask center.
    """
    intr = obs.intrinsics
    if out_w <= 0 or out_h <= 0 or out_w > intr.width or out_h > intr.height:
        raise BadDimensions(
            f"output {out_w}x{out_h} must be positive and at most {intr.width}x{intr.height}"
        )
    su = out_w / intr.width
    sv = out_h / intr.height
    scaled = CameraIntrinsics(
        width=out_w,
        height=out_h,
        fx=intr.fx * su,
        fy=intr.fy * sv,
        cx=(intr.cx + 0.5) * su - 0.5,
        cy=(intr.cy + 0.5) * sv - 0.5,
        max_range=intr.max_range,
    )
    small = render(obs.scene, obs.extrinsic, scaled)
    return gen_fac_gt(small, facing, params)


def peak_extract(h: Heatmap, confidence_threshold: float) -> Optional[Tuple[Tuple[int, int], float]]:
    """Location and value of the maximum, or None below the threshold.

    Returns ((u, v), confidence); ties resolve to the smallest row then column.
    """
    if not (0.0 <= confidence_threshold <= 1.0):
        raise ValueError("confidence_threshold must lie in [0, 1]")
    flat = int(np.argmax(h.values))
    value = float(h.values.reshape(-1)[flat])
    if value < confidence_threshold:
        return None
    v, u = divmod(flat, h.width)
    return ((u, v), value)


# ---------------------------------------------------------------------------
# Heatmap file format: magic "HMF1", u8 kind, u32 LE height, u32 LE width,
# then height*width float32 LE row-major.
# ---------------------------------------------------------------------------

_MAGIC = b"HMF1"


def save_heatmap(path: Path | str, h: Heatmap) -> None:
    header = _MAGIC + struct.pack("<BII", _KIND_CODES[h.kind], h.height, h.width)
    Path(path).write_bytes(header + np.ascontiguousarray(h.values, dtype="<f4").tobytes())


def load_heatmap(path: Path | str) -> Heatmap:
    blob = Path(path).read_bytes()
    if len(blob) < 13 or blob[:4] != _MAGIC:
        raise FormatError("bad magic, expected HMF1")
    code, height, width = struct.unpack("<BII", blob[4:13])
    if code not in _CODE_KINDS:
        raise FormatError(f"unknown heatmap kind code {code}")
    if height == 0 or width == 0:
        raise BadDimensions("heatmap dimensions must be positive")
    expected = 13 + height * width * 4
    if len(blob) != expected:
        raise FormatError(f"payload length {len(blob)} != expected {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=13).reshape(height, width)
    if not ((values >= 0.0) & (values <= 1.0)).all():
        raise BadHeatmap("heatmap file contains values outside [0, 1]")
    return Heatmap(values.copy(), _CODE_KINDS[code])
