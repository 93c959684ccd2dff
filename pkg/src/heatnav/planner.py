"""Heatmap-guided local planning and closed-loop episode execution.

A predicted navigation heatmap is projected from image space onto the
occupancy grid to form a potential field.  A sampling-based planner
(Gaussian-perturbed control sequences, exponentially weighted averaging)
rolls unicycle dynamics through that field and picks control sequences
that climb it while staying clear of obstacles.  Episodes alternate
render, predict, project, plan, and a short execution burst until the
robot reaches the target standpoint, collides, or times out.  A geodesic
waypoint follower provides the point-goal baseline counterpart.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import uniform_filter1d

from .errors import GenerationExhausted, ShapeMismatch, StartNotTraversable
from .evaluation import EpisodeResult
from .heatmap import NavGtParams, _backproject_all, peak_extract
from .predictors import Instruction, Prediction
from .sensor import (
    DEFAULT_CAMERA_HEIGHT,
    DEFAULT_CAMERA_PITCH,
    DEFAULT_INTRINSICS,
    CameraIntrinsics,
    Extrinsic,
    Observation,
    render,
)
from .world import (
    SQRT2,
    Embodiment,
    OccupancyGrid,
    Pose,
    Scene,
    geodesic_field,
    is_traversable,
    wrap_angle,
)

COLLISION_PENALTY = 1.0e6

# Safety margin added to the footprint radius when thresholding the
# cell-center distance field: covers the pose's offset inside its own
# cell plus the half-diagonal extent of an occupied cell, so a pose that
# passes the check can never overlap an occupied cell rectangle.
_HARD_MARGIN_CELLS = SQRT2


@dataclass(frozen=True)
class FieldParams:
    """Weights for scoring poses against a projected field."""

    alpha: float = 1.0
    beta: float = 0.5
    collision_weight: float = 0.05
    inflation_radius: float = 0.4
    facing_threshold: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.collision_weight < 0 or self.inflation_radius < 0:
            raise ValueError("collision parameters must be non-negative")
        if not 0.0 <= self.facing_threshold <= 1.0:
            raise ValueError("facing threshold must lie in [0, 1]")


class PotentialField:
    """Grid-aligned navigation values plus an optional facing point."""

    def __init__(
        self,
        grid: OccupancyGrid,
        m_nav: np.ndarray,
        facing_point: Optional[Tuple[float, float]] = None,
        params: FieldParams = FieldParams(),
    ):
        m_nav = np.ascontiguousarray(m_nav, dtype=np.float64)
        if m_nav.shape != grid.occ.shape:
            raise ShapeMismatch(f"field must be {grid.occ.shape}, got {m_nav.shape}")
        if not np.all(np.isfinite(m_nav)) or (m_nav < 0).any():
            raise ValueError("field values must be finite and non-negative")
        if m_nav[grid.occ].any():
            raise ValueError("field must be zero on occupied cells")
        if facing_point is not None:
            x, y = float(facing_point[0]), float(facing_point[1])
            if grid.cell_of(x, y) is None:
                raise ValueError("facing point must lie inside the grid")
            facing_point = (x, y)
        m_nav.setflags(write=False)
        self.grid = grid
        self.m_nav = m_nav
        self.facing_point = facing_point
        self.params = params

    def value_at(self, x: float, y: float) -> float:
        cell = self.grid.cell_of(x, y)
        return float(self.m_nav[cell]) if cell is not None else 0.0


def project_field(
    obs: Observation,
    prediction: Prediction,
    params: FieldParams = FieldParams(),
) -> PotentialField:
    """Max-pool a predicted navigation heatmap onto the occupancy grid.

    Every pixel with finite depth and positive heatmap value back-projects
    to a world point; each grid cell keeps the maximum over its pixels.
    Occupied cells are forced to zero.  The facing point is the
    back-projection of the facing heatmap's peak, when one clears the
    threshold and has finite depth.
    """
    grid = obs.scene.grid
    shape = (obs.intrinsics.height, obs.intrinsics.width)
    if prediction.h_nav.values.shape != shape or prediction.h_fac.values.shape != shape:
        raise ShapeMismatch(f"prediction resolution does not match observation {shape}")

    xs, ys = _backproject_all(obs)
    values = prediction.h_nav.values.astype(np.float64)
    keep = np.isfinite(xs) & (values > 0.0)
    m = np.zeros(grid.occ.shape, dtype=np.float64)
    if keep.any():
        cols = np.floor((xs[keep] - grid.origin[0]) / grid.resolution).astype(np.int64)
        rows = np.floor((ys[keep] - grid.origin[1]) / grid.resolution).astype(np.int64)
        inb = (rows >= 0) & (rows < grid.height) & (cols >= 0) & (cols < grid.width)
        np.maximum.at(m, (rows[inb], cols[inb]), values[keep][inb])
    m[grid.occ] = 0.0

    facing_point: Optional[Tuple[float, float]] = None
    peak = peak_extract(prediction.h_fac, params.facing_threshold)
    if peak is not None:
        (u, v), _ = peak
        if np.isfinite(xs[v, u]) and grid.cell_of(float(xs[v, u]), float(ys[v, u])) is not None:
            facing_point = (float(xs[v, u]), float(ys[v, u]))
    return PotentialField(grid, m, facing_point, params)


def facing_alignment(pose: Pose, facing_point: Optional[Tuple[float, float]]) -> float:
    """Clipped cosine between heading and the bearing to the facing point.

    1 when looking straight at it, 0 at or beyond 90 degrees, 0 when
    there is no facing point.  A pose exactly on the point counts as
    fully aligned.
    """
    if facing_point is None:
        return 0.0
    dx = facing_point[0] - pose.x
    dy = facing_point[1] - pose.y
    r = math.hypot(dx, dy)
    if r < 1e-9:
        return 1.0
    return max(0.0, (dx * math.cos(pose.theta) + dy * math.sin(pose.theta)) / r)


def hard_collision(grid: OccupancyGrid, x: float, y: float, radius: float) -> bool:
    """Conservative test for footprint-circle overlap with occupied cells.

    A point footprint collides exactly when its cell is occupied.  For a
    positive radius the cell-center distance field is thresholded at
    radius + resolution*sqrt(2); poses passing this can never overlap an
    occupied cell rectangle, at the price of flagging some near misses.
    """
    cell = grid.cell_of(x, y)
    if cell is None:
        return True
    if radius <= 0.0:
        return bool(grid.occ[cell])
    return bool(grid.obstacle_distance()[cell] <= radius + grid.resolution * _HARD_MARGIN_CELLS)


def _soft_cost(field: PotentialField, x: float, y: float) -> float:
    cell = field.grid.cell_of(x, y)
    if cell is None:
        return 0.0
    d = float(field.grid.obstacle_distance()[cell])
    if d < field.params.inflation_radius:
        return field.params.collision_weight / (d + 0.05)
    return 0.0


def j_value(field: PotentialField, pose: Pose, footprint_radius: float = 0.0) -> float:
    """Score a pose: alpha * field value + beta * alignment - collision cost.

    Hard collisions return exactly -COLLISION_PENALTY; otherwise obstacles
    closer than the inflation radius charge a hyperbolic proximity cost.
    """
    if hard_collision(field.grid, pose.x, pose.y, footprint_radius):
        return -COLLISION_PENALTY
    p = field.params
    return (
        p.alpha * field.value_at(pose.x, pose.y)
        + p.beta * facing_alignment(pose, field.facing_point)
        - _soft_cost(field, pose.x, pose.y)
    )


@dataclass(frozen=True)
class ControlSequence:
    """(v, omega) rows applied at a fixed timestep."""

    vs: np.ndarray
    omegas: np.ndarray
    dt: float

    def __post_init__(self):
        vs = np.ascontiguousarray(self.vs, dtype=np.float64)
        omegas = np.ascontiguousarray(self.omegas, dtype=np.float64)
        if vs.ndim != 1 or vs.shape != omegas.shape or vs.size == 0:
            raise ValueError("controls must be equal-length non-empty 1-D arrays")
        if not (np.all(np.isfinite(vs)) and np.all(np.isfinite(omegas))):
            raise ValueError("controls must be finite")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        vs.setflags(write=False)
        omegas.setflags(write=False)
        object.__setattr__(self, "vs", vs)
        object.__setattr__(self, "omegas", omegas)

    @property
    def n(self) -> int:
        return self.vs.size

    def clamped(self, embodiment: Embodiment) -> "ControlSequence":
        return ControlSequence(
            np.clip(self.vs, -embodiment.v_max, embodiment.v_max),
            np.clip(self.omegas, -embodiment.omega_max, embodiment.omega_max),
            self.dt,
        )


def _check_bounds(controls: ControlSequence, embodiment: Embodiment) -> None:
    if (np.abs(controls.vs) > embodiment.v_max + 1e-9).any():
        raise ValueError(f"|v| exceeds {embodiment.v_max} for {embodiment.name}")
    if (np.abs(controls.omegas) > embodiment.omega_max + 1e-9).any():
        raise ValueError(f"|omega| exceeds {embodiment.omega_max} for {embodiment.name}")


@dataclass(frozen=True)
class Trajectory:
    """Rolled-out poses with per-step score contributions and collision flags.

    `rewards[t]` is the full contribution of step t (semantic terms times
    dt, minus any collision penalty), so `score` equals `rewards.sum()`.
    `collisions[i]` marks whether a hard collision has happened at or
    before pose i; flags are sticky.
    """

    poses: Tuple[Pose, ...]
    vs: np.ndarray
    omegas: np.ndarray
    rewards: np.ndarray
    collisions: np.ndarray
    dt: float
    score: float

    @property
    def collision_free(self) -> bool:
        return not bool(self.collisions.any())


def rollout(
    field: PotentialField,
    start: Pose,
    controls: ControlSequence,
    embodiment: Embodiment,
) -> Trajectory:
    """Integrate unicycle dynamics through the field and score the path.

    Explicit Euler steps; the running score is a left Riemann sum of the
    pose score over time.  The first hard collision charges one penalty
    and zeroes all later contributions, while integration continues so
    consecutive poses always obey the dynamics.
    """
    _check_bounds(controls, embodiment)
    p = field.params
    radius = embodiment.footprint_radius
    n = controls.n
    dt = controls.dt
    poses: List[Pose] = [start]
    rewards = np.zeros(n, dtype=np.float64)
    collisions = np.zeros(n + 1, dtype=bool)

    x, y, th = start.x, start.y, start.theta
    collided = hard_collision(field.grid, x, y, radius)
    collisions[0] = collided
    if collided:
        rewards[0] -= COLLISION_PENALTY
    for t in range(n):
        if not collided:
            rewards[t] = dt * (
                p.alpha * field.value_at(x, y)
                + p.beta * facing_alignment(Pose(x, y, th), field.facing_point)
                - _soft_cost(field, x, y)
            )
        v = float(controls.vs[t])
        w = float(controls.omegas[t])
        x = x + v * math.cos(th) * dt
        y = y + v * math.sin(th) * dt
        th = wrap_angle(th + w * dt)
        poses.append(Pose(x, y, th))
        if not collided and hard_collision(field.grid, x, y, radius):
            rewards[t] -= COLLISION_PENALTY
            collided = True
        collisions[t + 1] = collided
    rewards.setflags(write=False)
    collisions.setflags(write=False)
    return Trajectory(
        poses=tuple(poses),
        vs=controls.vs,
        omegas=controls.omegas,
        rewards=rewards,
        collisions=collisions,
        dt=dt,
        score=float(rewards.sum()),
    )


def _batch_scores(
    field: PotentialField,
    start: Pose,
    vs: np.ndarray,
    omegas: np.ndarray,
    embodiment: Embodiment,
    dt: float,
) -> np.ndarray:
    """Vectorized twin of `rollout` returning only scores, shape (K,)."""
    grid = field.grid
    p = field.params
    res = grid.resolution
    ox, oy = grid.origin
    occ = grid.occ
    edt = grid.obstacle_distance()
    m_nav = field.m_nav
    radius = embodiment.footprint_radius
    fp = field.facing_point

    k = vs.shape[0]
    n = vs.shape[1]
    x = np.full(k, start.x)
    y = np.full(k, start.y)
    th = np.full(k, start.theta)
    scores = np.zeros(k)

    def lookup(xa: np.ndarray, ya: np.ndarray):
        cols = np.floor((xa - ox) / res).astype(np.int64)
        rows = np.floor((ya - oy) / res).astype(np.int64)
        inb = (rows >= 0) & (rows < grid.height) & (cols >= 0) & (cols < grid.width)
        rows_c = np.clip(rows, 0, grid.height - 1)
        cols_c = np.clip(cols, 0, grid.width - 1)
        return inb, rows_c, cols_c

    def hard(xa: np.ndarray, ya: np.ndarray) -> np.ndarray:
        inb, rows, cols = lookup(xa, ya)
        if radius <= 0.0:
            return ~inb | occ[rows, cols]
        return ~inb | (edt[rows, cols] <= radius + res * _HARD_MARGIN_CELLS)

    collided = hard(x, y)
    scores[collided] -= COLLISION_PENALTY
    for t in range(n):
        active = ~collided
        if active.any():
            inb, rows, cols = lookup(x, y)
            m = np.where(inb, m_nav[rows, cols], 0.0)
            d = np.where(inb, edt[rows, cols], np.inf)
            soft = np.where(
                d < p.inflation_radius, p.collision_weight / (d + 0.05), 0.0
            )
            if fp is None:
                align = 0.0
            else:
                dx = fp[0] - x
                dy = fp[1] - y
                r = np.hypot(dx, dy)
                close = r < 1e-9
                r_safe = np.where(close, 1.0, r)
                align = (dx * np.cos(th) + dy * np.sin(th)) / r_safe
                align = np.where(close, 1.0, np.maximum(0.0, align))
            contrib = dt * (p.alpha * m + p.beta * align - soft)
            scores += np.where(active, contrib, 0.0)
        v = vs[:, t]
        w = omegas[:, t]
        x = x + v * np.cos(th) * dt
        y = y + v * np.sin(th) * dt
        th = th + w * dt
        newly = ~collided & hard(x, y)
        scores[newly] -= COLLISION_PENALTY
        collided |= newly
    return scores


@dataclass(frozen=True)
class MppiParams:
    """Sampling planner configuration."""

    samples: int = 256
    horizon: int = 40
    dt: float = 0.1
    temperature: float = 1.0
    noise_std: Tuple[float, float] = (0.2, 0.6)
    iterations: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1 or self.horizon < 1 or self.iterations < 1:
            raise ValueError("samples, horizon, and iterations must be positive")
        if self.dt <= 0 or self.temperature <= 0:
            raise ValueError("dt and temperature must be positive")
        if self.noise_std[0] < 0 or self.noise_std[1] < 0:
            raise ValueError("noise scales must be non-negative")


def make_nominal(embodiment: Embodiment, params: MppiParams) -> ControlSequence:
    """Initial nominal sequence: cruise at top speed, no turning."""
    return ControlSequence(
        np.full(params.horizon, embodiment.v_max),
        np.zeros(params.horizon),
        params.dt,
    )


# Exploration noise is low-pass filtered along the horizon so samples can
# hold coordinated arcs; per-step variance is preserved by the sqrt(window)
# rescale.  White noise rarely sustains the turn rates a pivot needs.
NOISE_SMOOTH_WINDOW = 8


def _smooth_noise(noise: np.ndarray, window: int = NOISE_SMOOTH_WINDOW) -> np.ndarray:
    if window <= 1:
        return noise
    return uniform_filter1d(noise, size=window, axis=1, mode="constant") * math.sqrt(window)


def mppi_plan(
    field: PotentialField,
    start: Pose,
    embodiment: Embodiment,
    params: MppiParams = MppiParams(),
    nominal: Optional[ControlSequence] = None,
) -> Tuple[Trajectory, ControlSequence]:
    """Sampling-based plan: returns (best sampled trajectory, nominal).

    Each iteration perturbs the nominal controls with time-correlated
    Gaussian noise (see NOISE_SMOOTH_WINDOW), clamps to the embodiment's
    bounds, scores every sample with a batch
    rollout, and forms the softmax-weighted average (weights
    exp((S_k - S_max) / temperature)).  Three samples are pinned: the
    unperturbed nominal, a full brake, and a straight full-speed cruise,
    so stopping and covering ground both stay on the menu.  The nominal
    then adopts the better of the
    weighted average and the iteration's best sample, but only when that
    strictly beats the incumbent, so the nominal never regresses and is
    collision-free whenever any sample was.  Deterministic for a given
    seed.
    """
    if nominal is None:
        nominal = make_nominal(embodiment, params)
    if nominal.n != params.horizon or nominal.dt != params.dt:
        raise ValueError("nominal sequence must match the planner horizon and dt")
    _check_bounds(nominal, embodiment)
    rng = np.random.default_rng(params.seed)
    sigma_v, sigma_w = params.noise_std
    nom_v = nominal.vs.copy()
    nom_w = nominal.omegas.copy()
    nom_score = float(
        _batch_scores(field, start, nom_v[None, :], nom_w[None, :], embodiment, params.dt)[0]
    )
    best_score = -np.inf
    best_v = nom_v
    best_w = nom_w
    for _ in range(params.iterations):
        noise_v = _smooth_noise(rng.normal(0.0, sigma_v, (params.samples, params.horizon)))
        noise_w = _smooth_noise(rng.normal(0.0, sigma_w, (params.samples, params.horizon)))
        vs = np.clip(nom_v[None, :] + noise_v, -embodiment.v_max, embodiment.v_max)
        omegas = np.clip(nom_w[None, :] + noise_w, -embodiment.omega_max, embodiment.omega_max)
        vs[0] = nom_v
        omegas[0] = nom_w
        if params.samples > 1:
            vs[1] = 0.0
            omegas[1] = 0.0
        if params.samples > 2:
            # Pinned cruise keeps full-speed coverage on the menu even when
            # the (possibly warm-started) nominal has slowed down.
            vs[2] = embodiment.v_max
            omegas[2] = 0.0
        scores = _batch_scores(field, start, vs, omegas, embodiment, params.dt)
        k_best = int(np.argmax(scores))
        if scores[k_best] > best_score:
            best_score = float(scores[k_best])
            best_v = vs[k_best].copy()
            best_w = omegas[k_best].copy()
        weights = np.exp((scores - scores.max()) / params.temperature)
        weights /= weights.sum()
        mean_v = weights @ vs
        mean_w = weights @ omegas
        mean_score = float(
            _batch_scores(field, start, mean_v[None, :], mean_w[None, :], embodiment, params.dt)[0]
        )
        cand_score, cand_v, cand_w = max(
            (mean_score, mean_v, mean_w),
            (float(scores[k_best]), vs[k_best].copy(), omegas[k_best].copy()),
            key=lambda option: option[0],
        )
        if cand_score > nom_score:
            nom_v, nom_w, nom_score = cand_v, cand_w, cand_score
    best = rollout(field, start, ControlSequence(best_v, best_w, params.dt), embodiment)
    return best, ControlSequence(nom_v, nom_w, params.dt)


def _shift_controls(controls: ControlSequence, k: int) -> ControlSequence:
    """Drop the first k controls; hold the final speed and zero the turn
    rate over the padded tail (receding-horizon shift)."""
    if k <= 0:
        return controls
    k = min(k, controls.n)
    pad_v = np.concatenate([controls.vs[k:], np.full(k, controls.vs[-1])])
    pad_w = np.concatenate([controls.omegas[k:], np.zeros(k)])
    return ControlSequence(pad_v, pad_w, controls.dt)


def standpoint_goal(
    scene: Scene,
    target_id: int,
    params: NavGtParams = NavGtParams(),
) -> Tuple[float, float]:
    """World-frame ideal standpoint for a target: the free cell center
    with enough clearance that minimizes distance to the footprint.

    Viewpoint-independent twin of the heatmap ground truth's peak rule;
    ties break on row-major cell order.
    """
    grid = scene.grid
    obj = scene.object_by_id(target_id)
    ys = grid.origin[1] + (np.arange(grid.height) + 0.5) * grid.resolution
    xs = grid.origin[0] + (np.arange(grid.width) + 0.5) * grid.resolution
    xx, yy = np.meshgrid(xs, ys)
    xmin, ymin, xmax, ymax = obj.footprint
    dx = np.maximum(np.maximum(xmin - xx, 0.0), xx - xmax)
    dy = np.maximum(np.maximum(ymin - yy, 0.0), yy - ymax)
    d = np.hypot(dx, dy)
    eligible = ~grid.occ & (d < params.cutoff_radius)
    if params.clearance > 0:
        eligible &= grid.obstacle_distance() >= params.clearance
    if not eligible.any():
        raise GenerationExhausted(f"no admissible standpoint for object {target_id}")
    d = np.where(eligible, d, np.inf)
    row, col = np.unravel_index(int(np.argmin(d)), d.shape)
    return grid.cell_center((int(row), int(col)))


def _cycle_seed(base_seed: int, cycle: int) -> int:
    return int(np.random.SeedSequence([base_seed, cycle]).generate_state(1)[0])


def run_episode(
    scene: Scene,
    start: Pose,
    instruction: Instruction,
    predictor,
    embodiment: Embodiment,
    mppi: MppiParams = MppiParams(),
    field_params: FieldParams = FieldParams(),
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    camera_height: float = DEFAULT_CAMERA_HEIGHT,
    camera_pitch: float = DEFAULT_CAMERA_PITCH,
    nav_params: NavGtParams = NavGtParams(),
    replan_period: int = 10,
    max_steps: int = 200,
    success_distance: float = 1.0,
    success_alignment: float = 0.7,
    confidence_threshold: float = 0.5,
    split: str = "seen",
) -> EpisodeResult:
    """Closed-loop episode: render, predict, project, plan, execute.

    Every cycle renders from the current pose, asks the predictor for
    heatmaps, projects them into a field, plans, and executes the first
    `replan_period` nominal controls.  Terminates on success (within
    `success_distance` of the target standpoint, facing the facing target
    when one exists), on a hard collision, or at `max_steps`.  A cycle
    whose field carries no signal at all holds the robot in place while
    time advances.  `prediction_valid` records whether any cycle's
    navigation heatmap produced a peak above the confidence threshold;
    success is only declared when it did.
    """
    if instruction.nav_target is None:
        raise ValueError("episodes need a navigation target")
    if not is_traversable(scene, (start.x, start.y), embodiment):
        raise StartNotTraversable(f"start {start} not free for {embodiment.name}")
    if replan_period < 1:
        raise ValueError("replan_period must be positive")
    goal = standpoint_goal(scene, instruction.nav_target, nav_params)
    facing_goal: Optional[Tuple[float, float]] = None
    if instruction.fac_target is not None:
        facing_goal = scene.object_by_id(instruction.fac_target).center

    def reached(p: Pose) -> bool:
        if math.hypot(p.x - goal[0], p.y - goal[1]) > success_distance:
            return False
        return facing_goal is None or facing_alignment(p, facing_goal) >= success_alignment

    pose = start
    steps = 0
    valid = False
    collided = False
    success = False
    cycle = 0
    nominal: Optional[ControlSequence] = None
    while steps < max_steps and not success and not collided:
        obs = render(scene, Extrinsic(pose, camera_height, camera_pitch), intrinsics)
        prediction = predictor.predict(obs, instruction)
        if peak_extract(prediction.h_nav, confidence_threshold) is not None:
            valid = True
        field = project_field(obs, prediction, field_params)
        if valid and reached(pose):
            success = True
            break
        if not field.m_nav.any() and field.facing_point is None:
            # No signal to follow: hold position while the clock runs.
            steps = min(max_steps, steps + replan_period)
            cycle += 1
            continue
        cycle_params = dataclasses.replace(mppi, seed=_cycle_seed(mppi.seed, cycle))
        _, nominal = mppi_plan(field, pose, embodiment, cycle_params, nominal)
        executed = 0
        for t in range(min(replan_period, nominal.n)):
            v = float(nominal.vs[t])
            w = float(nominal.omegas[t])
            x = pose.x + v * math.cos(pose.theta) * mppi.dt
            y = pose.y + v * math.sin(pose.theta) * mppi.dt
            pose = Pose(x, y, wrap_angle(pose.theta + w * mppi.dt))
            steps += 1
            executed += 1
            if hard_collision(scene.grid, pose.x, pose.y, embodiment.footprint_radius):
                collided = True
                break
            if valid and reached(pose):
                success = True
                break
            if steps >= max_steps:
                break
        # Warm start: carry the unexecuted tail into the next cycle.
        nominal = _shift_controls(nominal, executed)
        cycle += 1
    return EpisodeResult(
        prediction_valid=valid,
        success=success,
        final_distance=math.hypot(pose.x - goal[0], pose.y - goal[1]),
        steps=steps,
        collided=collided,
        embodiment=embodiment.name,
        split=split,
        seed=mppi.seed,
        final_pose=pose,
    )


_NEIGHBORS = (
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
)


def waypoint_follow(
    scene: Scene,
    start: Pose,
    waypoint: Tuple[float, float],
    embodiment: Embodiment,
    dt: float = 0.1,
    max_steps: int = 200,
    goal_point: Optional[Tuple[float, float]] = None,
    split: str = "seen",
    seed: int = 0,
) -> EpisodeResult:
    """Drive to a single waypoint along the shortest grid path.

    The baseline counterpart of `run_episode` for predictors that emit a
    point instead of a heatmap.  If the waypoint cell is blocked once the
    grid is inflated by the embodiment's footprint (or no path exists),
    the episode deadlocks immediately: zero steps, `prediction_valid`
    False, so conventional navigation-error accounting drops it.  Steps
    are the control ticks needed to cover the geodesic path at top speed.
    `final_distance` is measured to `goal_point` when given (the true
    standpoint), else to the waypoint itself.
    """
    if not is_traversable(scene, (start.x, start.y), embodiment):
        raise StartNotTraversable(f"start {start} not free for {embodiment.name}")
    wx, wy = float(waypoint[0]), float(waypoint[1])
    ref = goal_point if goal_point is not None else (wx, wy)

    def result(p: Pose, ok: bool, valid: bool, steps: int) -> EpisodeResult:
        return EpisodeResult(
            prediction_valid=valid,
            success=ok,
            final_distance=math.hypot(p.x - ref[0], p.y - ref[1]),
            steps=steps,
            collided=False,
            embodiment=embodiment.name,
            split=split,
            seed=seed,
            final_pose=p,
        )

    inflated = scene.grid.inflated(embodiment.footprint_radius)
    wcell = inflated.cell_of(wx, wy)
    scell = inflated.cell_of(start.x, start.y)
    assert scell is not None
    if wcell is None or inflated.occ[wcell]:
        return result(start, False, False, 0)
    dist = geodesic_field(inflated, [wcell])
    total = float(dist[scell])
    if not math.isfinite(total):
        return result(start, False, False, 0)
    if scell == wcell:
        return result(start, True, True, 0)

    heading = math.atan2(wy - start.y, wx - start.x)
    budget = max_steps * embodiment.v_max * dt
    steps_needed = math.ceil(total / (embodiment.v_max * dt))
    if total <= budget:
        cx, cy = inflated.cell_center(wcell)
        return result(Pose(cx, cy, heading), True, True, steps_needed)
    # Walk the descent path until the step budget runs out.
    travelled = 0.0
    cell = scell
    while travelled < budget:
        candidates = []
        for dr, dc in _NEIGHBORS:
            nb = (cell[0] + dr, cell[1] + dc)
            if 0 <= nb[0] < inflated.height and 0 <= nb[1] < inflated.width:
                if math.isfinite(dist[nb]) and dist[nb] < dist[cell]:
                    candidates.append((dist[nb], nb))
        if not candidates:
            break
        _, nxt = min(candidates)
        step_len = inflated.resolution * (SQRT2 if nxt[0] != cell[0] and nxt[1] != cell[1] else 1.0)
        if travelled + step_len > budget:
            break
        travelled += step_len
        cell = nxt
    cx, cy = inflated.cell_center(cell)
    return result(Pose(cx, cy, heading), False, True, max_steps)


def save_trajectory_csv(path: Path | str, trajectory: Trajectory) -> None:
    """Write one row per pose: step,x,y,theta,v,omega,reward,collision.

    Rows 0..N-1 carry the control applied at that step and the step's
    score contribution; the final row repeats the terminal pose with
    zero control and reward.
    """
    lines = ["step,x,y,theta,v,omega,reward,collision"]
    n = len(trajectory.poses) - 1
    for i, pose in enumerate(trajectory.poses):
        v = trajectory.vs[i] if i < n else 0.0
        w = trajectory.omegas[i] if i < n else 0.0
        reward = trajectory.rewards[i] if i < n else 0.0
        flag = str(bool(trajectory.collisions[i])).lower()
        lines.append(
            f"{i},{pose.x:.9f},{pose.y:.9f},{pose.theta:.9f},"
            f"{v:.9f},{w:.9f},{reward:.9f},{flag}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
