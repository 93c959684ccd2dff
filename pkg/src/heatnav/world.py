"""Scene representation: occupancy grids, object instances, embodiments, poses.

Grids are stored row-major as boolean arrays with ``occ[row, col] == True``
meaning blocked; world x runs along columns, world y along rows.  Cells are
addressed as ``(row, col)`` tuples throughout.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import EmptySources, FormatError, UnknownInstance

Cell = Tuple[int, int]

SQRT2 = math.sqrt(2.0)
# Half diagonal of a unit cell; used when a conservative cell-vs-circle
# clearance test is needed.
HALF_CELL_DIAG = math.sqrt(0.5)

SCENE_SUFFIX = ".scene.json"

_LABEL_RE = re.compile(r"^[a-z][a-z0-9_]*$")


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    t = math.remainder(theta, math.tau)
    if t <= -math.pi:
        t += math.tau
    return t


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def distance_to(self, x: float, y: float) -> float:
        return math.hypot(self.x - x, self.y - y)


@dataclass(frozen=True)
class Embodiment:
    name: str
    footprint_radius: float
    v_max: float
    omega_max: float

    def __post_init__(self):
        if self.footprint_radius <= 0:
            raise ValueError("footprint_radius must be > 0")
        if self.v_max <= 0 or self.omega_max <= 0:
            raise ValueError("velocity bounds must be > 0")


# The robots are named by the benchmark; the numeric parameters are plausible
# config defaults and may be overridden freely.
EMBODIMENTS: Dict[str, Embodiment] = {
    "jetbot": Embodiment("jetbot", footprint_radius=0.12, v_max=0.5, omega_max=2.0),
    "h1": Embodiment("h1", footprint_radius=0.35, v_max=1.0, omega_max=1.5),
    "aliengo": Embodiment("aliengo", footprint_radius=0.30, v_max=1.2, omega_max=2.0),
}

MAX_FOOTPRINT_RADIUS = max(e.footprint_radius for e in EMBODIMENTS.values())


class OccupancyGrid:
    """Closed-world 2D occupancy map (boundary cells are always occupied)."""

    def __init__(self, occ: np.ndarray, resolution: float, origin: Tuple[float, float]):
        occ = np.ascontiguousarray(np.asarray(occ, dtype=bool))
        if occ.ndim != 2 or occ.size == 0:
            raise ValueError("occupancy array must be 2D and non-empty")
        if resolution <= 0:
            raise ValueError("resolution must be > 0")
        if occ.shape[0] >= 2 and occ.shape[1] >= 2:
            border = np.concatenate([occ[0, :], occ[-1, :], occ[:, 0], occ[:, -1]])
            if not border.all():
                raise ValueError("grid boundary cells must be occupied (closed world)")
        occ.setflags(write=False)
        self.occ = occ
        self.resolution = float(resolution)
        self.origin = (float(origin[0]), float(origin[1]))
        self._inflated: Dict[float, "OccupancyGrid"] = {}
        self._obstacle_distance: Optional[np.ndarray] = None

    @property
    def height(self) -> int:
        return self.occ.shape[0]

    @property
    def width(self) -> int:
        return self.occ.shape[1]

    def cell_of(self, x: float, y: float) -> Optional[Cell]:
        col = int(math.floor((x - self.origin[0]) / self.resolution))
        row = int(math.floor((y - self.origin[1]) / self.resolution))
        if 0 <= row < self.height and 0 <= col < self.width:
            return (row, col)
        return None

    def cell_center(self, cell: Cell) -> Tuple[float, float]:
        row, col = cell
        return (
            self.origin[0] + (col + 0.5) * self.resolution,
            self.origin[1] + (row + 0.5) * self.resolution,
        )

    def is_free_cell(self, cell: Cell) -> bool:
        return not self.occ[cell]

    def is_free_at(self, x: float, y: float) -> bool:
        cell = self.cell_of(x, y)
        return cell is not None and not self.occ[cell]

    def inflated(self, radius: float) -> "OccupancyGrid":
        """Memoized :func:`inflate`; grids are immutable so caching is safe."""
        key = round(float(radius), 9)
        grid = self._inflated.get(key)
        if grid is None:
            grid = inflate(self, radius)
            self._inflated[key] = grid
        return grid

    def obstacle_distance(self) -> np.ndarray:
        """Distance (m) from each cell center to the nearest occupied cell center."""
        if self._obstacle_distance is None:
            dist = ndimage.distance_transform_edt(~self.occ, sampling=self.resolution)
            dist.setflags(write=False)
            self._obstacle_distance = dist
        return self._obstacle_distance


def inflate(grid: OccupancyGrid, radius: float) -> OccupancyGrid:
    """Grow occupied space by a Euclidean radius measured between cell centers."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return OccupancyGrid(grid.occ, grid.resolution, grid.origin)
    r_cells = int(math.floor(radius / grid.resolution + 1e-9))
    if r_cells == 0:
        return OccupancyGrid(grid.occ, grid.resolution, grid.origin)
    span = np.arange(-r_cells, r_cells + 1)
    dr, dc = np.meshgrid(span, span, indexing="ij")
    kernel = np.hypot(dr, dc) * grid.resolution <= radius + 1e-9
    occ = ndimage.binary_dilation(grid.occ, structure=kernel)
    return OccupancyGrid(occ, grid.resolution, grid.origin)


def geodesic_field(grid: OccupancyGrid, sources: Iterable[Cell]) -> np.ndarray:
    """8-connected Dijkstra distances (m) from a set of free source cells.

    Axial steps cost one resolution, diagonal steps sqrt(2) resolutions.
    Occupied or unreachable cells map to +inf.
    """
    src = list(sources)
    if not src:
        raise EmptySources("geodesic_field needs at least one source cell")
    dist = np.full(grid.occ.shape, np.inf)
    import heapq

    heap: List[Tuple[float, int, int]] = []
    for row, col in src:
        if grid.occ[row, col]:
            raise ValueError(f"source cell ({row}, {col}) is occupied")
        dist[row, col] = 0.0
        heap.append((0.0, row, col))
    heapq.heapify(heap)
    res = grid.resolution
    diag = res * SQRT2
    occ = grid.occ
    h, w = occ.shape
    while heap:
        d, row, col = heapq.heappop(heap)
        if d > dist[row, col]:
            continue
        for drow in (-1, 0, 1):
            for dcol in (-1, 0, 1):
                if drow == 0 and dcol == 0:
                    continue
                nrow, ncol = row + drow, col + dcol
                if not (0 <= nrow < h and 0 <= ncol < w) or occ[nrow, ncol]:
                    continue
                nd = d + (diag if drow != 0 and dcol != 0 else res)
                if nd < dist[nrow, ncol]:
                    dist[nrow, ncol] = nd
                    heapq.heappush(heap, (nd, nrow, ncol))
    return dist


@dataclass(frozen=True)
class ObjectInstance:
    id: int
    label: str
    footprint: Tuple[float, float, float, float]  # xmin, ymin, xmax, ymax (m)
    height: float

    def __post_init__(self):
        if self.id <= 0:
            raise ValueError("object id must be a positive integer")
        if not _LABEL_RE.match(self.label):
            raise ValueError(f"label must be a lowercase token, got {self.label!r}")
        xmin, ymin, xmax, ymax = self.footprint
        if not (xmin < xmax and ymin < ymax):
            raise ValueError("footprint must satisfy xmin < xmax and ymin < ymax")
        if self.height <= 0:
            raise ValueError("height must be > 0")

    @property
    def center(self) -> Tuple[float, float]:
        xmin, ymin, xmax, ymax = self.footprint
        return ((xmin + xmax) / 2.0, (ymin + ymax) / 2.0)

    def distance_to(self, x: float, y: float) -> float:
        """Euclidean distance from a point to the footprint rectangle."""
        xmin, ymin, xmax, ymax = self.footprint
        dx = max(xmin - x, 0.0, x - xmax)
        dy = max(ymin - y, 0.0, y - ymax)
        return math.hypot(dx, dy)


def rasterize_footprint(grid: OccupancyGrid, footprint: Sequence[float]) -> np.ndarray:
    """Boolean mask of cells whose center lies inside the footprint rectangle."""
    xmin, ymin, xmax, ymax = footprint
    xs = grid.origin[0] + (np.arange(grid.width) + 0.5) * grid.resolution
    ys = grid.origin[1] + (np.arange(grid.height) + 0.5) * grid.resolution
    in_x = (xs >= xmin) & (xs <= xmax)
    in_y = (ys >= ymin) & (ys <= ymax)
    return np.outer(in_y, in_x)


class Scene:
    """Immutable world model: grid + object instances + spawn poses."""

    def __init__(
        self,
        grid: OccupancyGrid,
        objects: Sequence[ObjectInstance],
        spawns: Sequence[Pose],
        seed: int,
        validate: bool = True,
    ):
        self.grid = grid
        self.objects: Tuple[ObjectInstance, ...] = tuple(objects)
        self.spawns: Tuple[Pose, ...] = tuple(spawns)
        self.seed = int(seed)
        self._by_id = {o.id: o for o in self.objects}
        if len(self._by_id) != len(self.objects):
            raise ValueError("object ids must be unique within a scene")
        object_mask = np.zeros(grid.occ.shape, dtype=bool)
        for obj in self.objects:
            object_mask |= rasterize_footprint(grid, obj.footprint)
        object_mask.setflags(write=False)
        self.object_mask = object_mask
        wall_mask = grid.occ & ~object_mask
        wall_mask.setflags(write=False)
        self.wall_mask = wall_mask
        self._render_boxes: Optional[np.ndarray] = None
        self._render_ids: Optional[np.ndarray] = None
        if validate:
            self._validate()

    def _validate(self) -> None:
        if (self.object_mask & ~self.grid.occ).any():
            raise ValueError("object footprint cells must be occupied in the grid")
        if not self.spawns:
            return
        inflated = self.grid.inflated(MAX_FOOTPRINT_RADIUS)
        labels, _ = ndimage.label(~self.grid.occ, structure=np.ones((3, 3)))
        spawn_components = set()
        for pose in self.spawns:
            cell = self.grid.cell_of(pose.x, pose.y)
            if cell is None or inflated.occ[cell]:
                raise ValueError(f"spawn {pose} not free for the largest embodiment")
            spawn_components.add(int(labels[cell]))
        if len(spawn_components) > 1:
            raise ValueError("all spawns must share one free connected component")

    def object_by_id(self, object_id: int) -> ObjectInstance:
        try:
            return self._by_id[object_id]
        except KeyError:
            raise UnknownInstance(f"no object with id {object_id}") from None

    def has_object(self, object_id: int) -> bool:
        return object_id in self._by_id

    def render_geometry(self) -> Tuple[np.ndarray, np.ndarray]:
        """Boxes for raycasting: (N, 6) [xmin ymin zmin xmax ymax zmax] and ids.

        Objects come first (so that exact ray ties resolve to objects), then
        wall cells merged into row runs with a fixed 2.5 m indoor wall height.
        """
        if self._render_boxes is not None:
            return self._render_boxes, self._render_ids
        boxes: List[List[float]] = []
        ids: List[int] = []
        for obj in self.objects:
            xmin, ymin, xmax, ymax = obj.footprint
            boxes.append([xmin, ymin, 0.0, xmax, ymax, obj.height])
            ids.append(obj.id)
        res = self.grid.resolution
        ox, oy = self.grid.origin
        for row in range(self.grid.height):
            cols = np.flatnonzero(self.wall_mask[row])
            if cols.size == 0:
                continue
            splits = np.split(cols, np.flatnonzero(np.diff(cols) > 1) + 1)
            for run in splits:
                c0, c1 = int(run[0]), int(run[-1])
                boxes.append(
                    [
                        ox + c0 * res,
                        oy + row * res,
                        0.0,
                        ox + (c1 + 1) * res,
                        oy + (row + 1) * res,
                        WALL_HEIGHT,
                    ]
                )
                ids.append(WALL_ID)
        self._render_boxes = np.asarray(boxes, dtype=float).reshape(len(ids), 6)
        self._render_ids = np.asarray(ids, dtype=np.int32)
        return self._render_boxes, self._render_ids


WALL_HEIGHT = 2.5
WALL_ID = -1
FLOOR_ID = 0


def is_traversable(scene: Scene, point: Sequence[float], embodiment: Optional[Embodiment]) -> bool:
    """True iff the point's cell is free after inflating by the footprint radius.

    ``embodiment=None`` queries the raw (zero-radius) grid.
    """
    radius = embodiment.footprint_radius if embodiment is not None else 0.0
    grid = scene.grid.inflated(radius)
    return grid.is_free_at(float(point[0]), float(point[1]))


# ---------------------------------------------------------------------------
# Scene file format (.scene.json): JSON with run-length encoded cells.
# ---------------------------------------------------------------------------

_RLE_TOKEN = re.compile(r"(\d+)([FO])")


def _encode_cells(occ: np.ndarray) -> str:
    flat = occ.ravel()
    parts: List[str] = []
    i = 0
    n = flat.size
    while i < n:
        j = i
        while j < n and flat[j] == flat[i]:
            j += 1
        parts.append(f"{j - i}{'O' if flat[i] else 'F'}")
        i = j
    return "".join(parts)


def _decode_cells(text: str, width: int, height: int) -> np.ndarray:
    out = np.empty(width * height, dtype=bool)
    pos = 0
    end = 0
    for m in _RLE_TOKEN.finditer(text):
        if m.start() != end:
            raise FormatError("malformed cell run-length encoding")
        count = int(m.group(1))
        out[pos : pos + count] = m.group(2) == "O"
        pos += count
        end = m.end()
    if end != len(text) or pos != width * height:
        raise FormatError("cell run-length data does not match grid dimensions")
    return out.reshape(height, width)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "resolution": scene.grid.resolution,
        "origin": [scene.grid.origin[0], scene.grid.origin[1]],
        "width": scene.grid.width,
        "height": scene.grid.height,
        "cells": _encode_cells(scene.grid.occ),
        "objects": [
            {
                "id": o.id,
                "label": o.label,
                "footprint": list(o.footprint),
                "height": o.height,
            }
            for o in scene.objects
        ],
        "spawns": [{"x": p.x, "y": p.y, "theta": p.theta} for p in scene.spawns],
        "seed": scene.seed,
    }


def scene_from_dict(data: dict) -> Scene:
    try:
        grid = OccupancyGrid(
            _decode_cells(data["cells"], int(data["width"]), int(data["height"])),
            float(data["resolution"]),
            (float(data["origin"][0]), float(data["origin"][1])),
        )
        objects = [
            ObjectInstance(
                id=int(o["id"]),
                label=str(o["label"]),
                footprint=tuple(float(v) for v in o["footprint"]),
                height=float(o["height"]),
            )
            for o in data["objects"]
        ]
        spawns = [Pose(float(s["x"]), float(s["y"]), float(s["theta"])) for s in data["spawns"]]
        seed = int(data["seed"])
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"malformed scene document: {exc}") from exc
    return Scene(grid, objects, spawns, seed)


def save_scene(scene: Scene, path: Path | str) -> None:
    payload = json.dumps(scene_to_dict(scene), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(payload + "\n", encoding="utf-8")


def load_scene(path: Path | str) -> Scene:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"scene file is not valid JSON: {exc}") from exc
    return scene_from_dict(data)
