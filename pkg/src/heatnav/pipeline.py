"""Scene generation, dataset building, and benchmark orchestration.

Everything here is deterministic for a given (seed, config): scenes come
from seeded rejection sampling, per-sample randomness is derived through
`numpy.random.SeedSequence`, and all JSON is written with sorted keys so
rebuilds are byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shlex
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import ndimage

from .errors import (
    EmptyDataset,
    FormatError,
    GenerationExhausted,
    NoObjects,
)
from .evaluation import (
    EpisodeResult,
    MetricsReport,
    SampleJudgment,
    Thresholds,
    aggregate,
    judge_sample,
)
from .heatmap import (
    FacGtParams,
    Heatmap,
    NavGtParams,
    gen_fac_gt,
    gen_nav_gt,
    load_heatmap,
    peak_extract,
    save_heatmap,
)
from .planner import (
    FieldParams,
    MppiParams,
    mppi_plan,
    project_field,
    run_episode,
    standpoint_goal,
    waypoint_follow,
)
from .predictors import (
    ExternalEndpoint,
    ExternalPredictor,
    Instruction,
    NoiseParams,
    NoisyPredictor,
    OraclePredictor,
    PointBaselinePredictor,
    Prediction,
    ToyModel,
    TrainSample,
    ZeroPredictor,
    build_wire_meta,
    external_predict_files,
)
from .sensor import (
    DEFAULT_CAMERA_HEIGHT,
    DEFAULT_CAMERA_PITCH,
    DEFAULT_INTRINSICS,
    CameraIntrinsics,
    Extrinsic,
    Observation,
    load_depth,
    load_instances,
    pixel_to_world,
    render,
    save_depth,
    save_instances,
)
from .world import (
    EMBODIMENTS,
    MAX_FOOTPRINT_RADIUS,
    Embodiment,
    ObjectInstance,
    OccupancyGrid,
    Pose,
    Scene,
    load_scene,
    rasterize_footprint,
    save_scene,
)

logger = logging.getLogger("heatnav.pipeline")

DEFAULT_VOCAB: Tuple[str, ...] = (
    "sofa",
    "chair",
    "table",
    "tv",
    "bed",
    "window",
    "door",
    "plant",
)

# Base (width, depth, height) in meters per label; jittered +-15% at placement.
LABEL_SIZES: Dict[str, Tuple[float, float, float]] = {
    "sofa": (1.6, 0.8, 0.8),
    "chair": (0.5, 0.5, 0.9),
    "table": (1.2, 0.7, 0.75),
    "tv": (1.0, 0.2, 1.1),
    "bed": (1.9, 1.4, 0.6),
    "window": (1.2, 0.15, 1.5),
    "door": (0.9, 0.15, 2.0),
    "plant": (0.4, 0.4, 1.2),
}
_DEFAULT_SIZE = (0.6, 0.6, 0.8)

SPLIT_TAGS: Tuple[str, str] = ("train_seen", "test_unseen")
_SHORT_SPLIT = {"train_seen": "seen", "test_unseen": "unseen"}

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

_SCENE_RESTARTS = 64
_PLACEMENT_TRIES = 40
_POSE_TRIES = 400


def _derive_seed(*entropy: int) -> int:
    """Stable child seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneGenParams:
    """Knobs for the random room generator."""

    room_extent: Tuple[float, float] = (4.0, 6.0)
    object_count: Tuple[int, int] = (2, 5)
    vocabulary: Tuple[str, ...] = DEFAULT_VOCAB
    min_clearance: float = 0.9
    resolution: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.room_extent
        if not (0.0 < lo <= hi):
            raise ValueError("room_extent must satisfy 0 < lo <= hi")
        clo, chi = self.object_count
        if not (0 <= clo <= chi):
            raise ValueError("object_count must satisfy 0 <= lo <= hi")
        if not self.vocabulary:
            raise ValueError("vocabulary must not be empty")
        if self.min_clearance <= 0:
            raise ValueError("min_clearance must be > 0")
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


def _rect_gap(a: Sequence[float], b: Sequence[float]) -> float:
    """Euclidean gap between two axis-aligned rectangles (0 if overlapping)."""
    dx = max(a[0] - b[2], b[0] - a[2], 0.0)
    dy = max(a[1] - b[3], b[1] - a[3], 0.0)
    return math.hypot(dx, dy)


def _boundary_grid(nx: int, ny: int, resolution: float) -> np.ndarray:
    occ = np.zeros((ny, nx), dtype=bool)
    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True
    return occ


def _place_objects(
    params: SceneGenParams, rng: np.random.Generator, room_w: float, room_h: float, count: int
) -> Optional[List[ObjectInstance]]:
    res = params.resolution
    margin = res + params.min_clearance
    objects: List[ObjectInstance] = []
    for idx in range(count):
        placed = False
        for _ in range(_PLACEMENT_TRIES):
            label = params.vocabulary[int(rng.integers(len(params.vocabulary)))]
            bw, bd, bh = LABEL_SIZES.get(label, _DEFAULT_SIZE)
            scale = rng.uniform(0.85, 1.15)
            bw, bd, bh = bw * scale, bd * scale, bh * scale
            if rng.uniform() < 0.5:
                bw, bd = bd, bw
            x_lo, x_hi = margin + bw / 2, room_w - margin - bw / 2
            y_lo, y_hi = margin + bd / 2, room_h - margin - bd / 2
            if x_lo >= x_hi or y_lo >= y_hi:
                continue
            cx = rng.uniform(x_lo, x_hi)
            cy = rng.uniform(y_lo, y_hi)
            footprint = (cx - bw / 2, cy - bd / 2, cx + bw / 2, cy + bd / 2)
            if all(_rect_gap(footprint, o.footprint) >= params.min_clearance for o in objects):
                objects.append(ObjectInstance(idx + 1, label, footprint, bh))
                placed = True
                break
        if not placed:
            return None
    return objects


def _try_scene(params: SceneGenParams, rng: np.random.Generator, seed: int) -> Optional[Scene]:
    res = params.resolution
    side_lo, side_hi = params.room_extent
    nx = max(int(round(rng.uniform(side_lo, side_hi) / res)), 8)
    ny = max(int(round(rng.uniform(side_lo, side_hi) / res)), 8)
    room_w, room_h = nx * res, ny * res

    clo, chi = params.object_count
    count = int(rng.integers(clo, chi + 1))
    objects = _place_objects(params, rng, room_w, room_h, count)
    if objects is None:
        return None

    occ = _boundary_grid(nx, ny, res)
    grid = OccupancyGrid(occ, res, (0.0, 0.0))
    for obj in objects:
        occ = occ | rasterize_footprint(grid, obj.footprint)
    grid = OccupancyGrid(occ, res, (0.0, 0.0))

    inflated = grid.inflated(MAX_FOOTPRINT_RADIUS)
    free_inf = ~inflated.occ
    if int(free_inf.sum()) < 3:
        return None
    # One traversable component for the largest embodiment keeps every
    # spawn/goal pair reachable.
    _, n_comp = ndimage.label(free_inf, structure=np.ones((3, 3)))
    if n_comp != 1:
        return None

    cells = np.argwhere(free_inf)
    order = rng.permutation(len(cells))
    n_spawns = min(8, len(cells))
    spawns = []
    for i in order[:n_spawns]:
        x, y = grid.cell_center((int(cells[i][0]), int(cells[i][1])))
        spawns.append(Pose(x, y, float(rng.uniform(-math.pi, math.pi))))
    return Scene(grid, objects, spawns, seed=seed)


def gen_scene(params: SceneGenParams, seed: int) -> Scene:
    """Random rectangular room with clearance-separated boxes and spawns.

    Deterministic for a given (params, seed); raises GenerationExhausted
    when the requested object count cannot be placed.
    """
    if seed < 0:
        raise ValueError("seed must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, seed]))
    for _ in range(_SCENE_RESTARTS):
        scene = _try_scene(params, rng, seed)
        if scene is not None:
            logger.debug("scene seed=%d: %d objects", seed, len(scene.objects))
            return scene
    raise GenerationExhausted(
        f"could not generate a scene for seed {seed} within {_SCENE_RESTARTS} attempts"
    )


# ---------------------------------------------------------------------------
# Instruction generation
# ---------------------------------------------------------------------------

TEMPLATE_COUNT = 5


def _visible_object_ids(scene: Scene, pose: Pose) -> Set[int]:
    obs = render(scene, Extrinsic(pose))
    return {int(i) for i in np.unique(obs.instance_ids) if i > 0}


def gen_instruction(
    scene: Scene,
    pose: Pose,
    seed: int,
    p_neg: float = 0.2,
    visible_ids: Optional[Set[int]] = None,
) -> Instruction:
    """One templated instruction grounded in the scene.

    Positive draws pick one of five templates uniformly and prefer objects
    visible from `pose`; with probability `p_neg` (and when some vocabulary
    label is absent from the scene) the instruction names an absent label
    instead, producing all-zero ground truth.
    """
    if not scene.objects:
        raise NoObjects("cannot generate an instruction for a scene with no objects")
    if not 0.0 <= p_neg <= 1.0:
        raise ValueError("p_neg must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    u_neg = rng.uniform()
    present = {o.label for o in scene.objects}
    absent = [label for label in DEFAULT_VOCAB if label not in present]
    if u_neg < p_neg and absent:
        label = absent[int(rng.integers(len(absent)))]
        if rng.uniform() < 0.5:
            return Instruction(f"go to the {label}")
        return Instruction(f"face the {label}")

    if visible_ids is None:
        visible_ids = _visible_object_ids(scene, pose)
    pool = [o for o in scene.objects if o.id in visible_ids] or list(scene.objects)
    template = int(rng.integers(TEMPLATE_COUNT))
    a = pool[int(rng.integers(len(pool)))]
    others = [o for o in pool if o.id != a.id] or [a]
    b = others[int(rng.integers(len(others)))]
    if template == 0:
        return Instruction(f"go to the {a.label}", nav_target=a.id)
    if template == 1:
        return Instruction(f"go to the {a.label} and face the {b.label}", a.id, b.id)
    if template == 2:
        return Instruction(f"face the {a.label}", fac_target=a.id)
    if template == 3:
        return Instruction(f"go to <ref:{a.id}>", nav_target=a.id)
    return Instruction(f"go to the {a.label} and face <ref:{b.id}>", a.id, b.id)


# ---------------------------------------------------------------------------
# Dataset building
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BuildParams:
    """Full configuration of a dataset build; hashed into the manifest."""

    scenes: int = 8
    samples_per_scene: int = 4
    split: float = 0.5
    seed: int = 0
    p_neg: float = 0.2
    scene_params: SceneGenParams = SceneGenParams()
    nav_params: NavGtParams = NavGtParams()
    fac_params: FacGtParams = FacGtParams()
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    camera_height: float = DEFAULT_CAMERA_HEIGHT
    camera_pitch: float = DEFAULT_CAMERA_PITCH

    def __post_init__(self):
        if self.scenes < 1:
            raise ValueError("scenes must be >= 1")
        if self.samples_per_scene < 1:
            raise ValueError("samples_per_scene must be >= 1")
        if not 0.0 <= self.split <= 1.0:
            raise ValueError("split must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if not 0.0 <= self.p_neg <= 1.0:
            raise ValueError("p_neg must lie in [0, 1]")


def config_dict(params: BuildParams) -> dict:
    return asdict(params)


def config_hash(params: BuildParams) -> str:
    blob = json.dumps(config_dict(params), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _sample_pose(scene: Scene, inflated: OccupancyGrid, rng: np.random.Generator) -> Pose:
    grid = scene.grid
    x_lo = grid.origin[0] + grid.resolution
    x_hi = grid.origin[0] + grid.width * grid.resolution - grid.resolution
    y_lo = grid.origin[1] + grid.resolution
    y_hi = grid.origin[1] + grid.height * grid.resolution - grid.resolution
    for _ in range(_POSE_TRIES):
        x = float(rng.uniform(x_lo, x_hi))
        y = float(rng.uniform(y_lo, y_hi))
        cell = inflated.cell_of(x, y)
        if cell is not None and not inflated.occ[cell]:
            return Pose(x, y, float(rng.uniform(-math.pi, math.pi)))
    raise GenerationExhausted("could not sample a traversable camera pose")


def _require(data: dict, key: str, context: str):
    try:
        return data[key]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{context} is missing field {key!r}") from exc


def build_dataset(out_dir: Path | str, params: BuildParams = BuildParams()) -> dict:
    """Generate scenes, render samples, write ground truth, emit a manifest.

    Scenes (not samples) are partitioned into train_seen/test_unseen; the
    manifest is written last via temp-file rename so a crash never leaves a
    manifest pointing at missing files.  Byte-identical for a fixed params.
    """
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "samples").mkdir(parents=True, exist_ok=True)

    n_seen = int(round(params.scenes * params.split))
    scene_entries: List[dict] = []
    samples: List[dict] = []
    extr_args = {"height": params.camera_height, "pitch": params.camera_pitch}

    for i in range(params.scenes):
        scene = gen_scene(params.scene_params, _derive_seed(params.seed, 0, i))
        tag = SPLIT_TAGS[0] if i < n_seen else SPLIT_TAGS[1]
        scene_rel = f"scenes/scene-{i:04d}.scene.json"
        save_scene(scene, out / scene_rel)
        scene_entries.append({"path": scene_rel, "split": tag})
        inflated = scene.grid.inflated(MAX_FOOTPRINT_RADIUS)

        for j in range(params.samples_per_scene):
            rng = np.random.default_rng(np.random.SeedSequence([params.seed, 1, i, j]))
            pose = _sample_pose(scene, inflated, rng)
            obs = render(scene, Extrinsic(pose, **extr_args), params.intrinsics)
            visible = {int(v) for v in np.unique(obs.instance_ids) if v > 0}
            instruction = gen_instruction(
                scene, pose, _derive_seed(params.seed, 2, i, j), params.p_neg, visible
            )
            nav_obj = (
                scene.object_by_id(instruction.nav_target)
                if instruction.nav_target is not None
                else None
            )
            fac_obj = (
                scene.object_by_id(instruction.fac_target)
                if instruction.fac_target is not None
                else None
            )
            nav_gt = gen_nav_gt(obs, nav_obj, params.nav_params)
            fac_gt = gen_fac_gt(obs, fac_obj, params.fac_params)

            sid = f"s{i:04d}-{j:02d}"
            sdir = out / "samples" / sid
            sdir.mkdir(parents=True, exist_ok=True)
            save_depth(sdir / "depth.dpt", obs.depth.astype(np.float32))
            save_instances(sdir / "instances.seg", obs.instance_ids)
            save_heatmap(sdir / "nav.hmf", nav_gt)
            save_heatmap(sdir / "fac.hmf", fac_gt)
            record = {
                "id": sid,
                "scene": scene_rel,
                "split": tag,
                "pose": {"x": pose.x, "y": pose.y, "theta": pose.theta},
                "camera": {
                    "width": params.intrinsics.width,
                    "height": params.intrinsics.height,
                    "fx": params.intrinsics.fx,
                    "fy": params.intrinsics.fy,
                    "cx": params.intrinsics.cx,
                    "cy": params.intrinsics.cy,
                    "max_range": params.intrinsics.max_range,
                    "camera_height": params.camera_height,
                    "camera_pitch": params.camera_pitch,
                },
                "instruction": {
                    "text": instruction.text,
                    "nav_target": instruction.nav_target,
                    "fac_target": instruction.fac_target,
                },
                "depth": f"samples/{sid}/depth.dpt",
                "instances": f"samples/{sid}/instances.seg",
                "nav_gt": f"samples/{sid}/nav.hmf",
                "fac_gt": f"samples/{sid}/fac.hmf",
                "record": f"samples/{sid}/record.json",
            }
            (sdir / "record.json").write_text(
                json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n",
                encoding="utf-8",
            )
            samples.append(record)
        logger.info("scene %d/%d (%s) done", i + 1, params.scenes, tag)

    counts = {tag: sum(1 for s in samples if s["split"] == tag) for tag in SPLIT_TAGS}
    seen_scenes = {e["path"] for e in scene_entries if e["split"] == SPLIT_TAGS[0]}
    unseen_scenes = {e["path"] for e in scene_entries if e["split"] == SPLIT_TAGS[1]}
    if seen_scenes & unseen_scenes:
        raise FormatError("split hygiene violated: a scene appears in both splits")

    manifest = {
        "version": MANIFEST_VERSION,
        "config": config_dict(params),
        "config_hash": config_hash(params),
        "counts": counts,
        "scenes": scene_entries,
        "samples": samples,
    }
    tmp = out / (MANIFEST_NAME + ".tmp")
    tmp.write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )
    os.replace(tmp, out / MANIFEST_NAME)
    logger.info("dataset written to %s (%s)", out, counts)
    return manifest


def load_manifest(data_dir: Path | str) -> dict:
    """Parse and validate the manifest: counts, split tags, file existence."""
    root = Path(data_dir)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise FormatError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if _require(manifest, "version", "manifest") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('version')!r}")

    scene_split: Dict[str, str] = {}
    for entry in _require(manifest, "scenes", "manifest"):
        tag = _require(entry, "split", "scene entry")
        if tag not in SPLIT_TAGS:
            raise FormatError(f"unknown split tag {tag!r}")
        scene_split[_require(entry, "path", "scene entry")] = tag

    samples = _require(manifest, "samples", "manifest")
    tally = {tag: 0 for tag in SPLIT_TAGS}
    for rec in samples:
        tag = _require(rec, "split", "sample record")
        if tag not in SPLIT_TAGS:
            raise FormatError(f"unknown split tag {tag!r}")
        tally[tag] += 1
        scene_rel = _require(rec, "scene", "sample record")
        if scene_split.get(scene_rel) != tag:
            raise FormatError(f"sample {rec.get('id')!r} split disagrees with its scene")
        for key in ("scene", "depth", "instances", "nav_gt", "fac_gt", "record"):
            rel = _require(rec, key, "sample record")
            if not (root / rel).is_file():
                raise FormatError(f"manifest references a missing file: {rel}")

    counts = _require(manifest, "counts", "manifest")
    if {k: int(v) for k, v in counts.items()} != tally:
        raise FormatError(f"manifest counts {counts} disagree with samples {tally}")
    return manifest


def load_sample(
    data_dir: Path | str,
    record: dict,
    scene_cache: Optional[Dict[str, Scene]] = None,
) -> Tuple[Observation, Instruction, Heatmap, Heatmap]:
    """Rebuild (observation, instruction, nav ground truth, fac ground truth)."""
    root = Path(data_dir)
    scene_rel = _require(record, "scene", "sample record")
    if scene_cache is not None and scene_rel in scene_cache:
        scene = scene_cache[scene_rel]
    else:
        scene = load_scene(root / scene_rel)
        if scene_cache is not None:
            scene_cache[scene_rel] = scene
    cam = _require(record, "camera", "sample record")
    try:
        intr = CameraIntrinsics(
            int(cam["width"]),
            int(cam["height"]),
            float(cam["fx"]),
            float(cam["fy"]),
            float(cam["cx"]),
            float(cam["cy"]),
            float(cam["max_range"]),
        )
        pose_d = record["pose"]
        pose = Pose(float(pose_d["x"]), float(pose_d["y"]), float(pose_d["theta"]))
        extr = Extrinsic(pose, float(cam["camera_height"]), float(cam["camera_pitch"]))
        ins_d = record["instruction"]
        instruction = Instruction(
            str(ins_d["text"]),
            ins_d["nav_target"],
            ins_d["fac_target"],
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed sample record: {exc}") from exc
    obs = Observation(
        load_depth(root / record["depth"]),
        load_instances(root / record["instances"]),
        intr,
        extr,
        scene,
    )
    nav_gt = load_heatmap(root / record["nav_gt"])
    fac_gt = load_heatmap(root / record["fac_gt"])
    return obs, instruction, nav_gt, fac_gt


def validate_dataset(data_dir: Path | str) -> dict:
    """Deep check: every sample loads and its stored maps pass invariants."""
    manifest = load_manifest(data_dir)
    cache: Dict[str, Scene] = {}
    for rec in manifest["samples"]:
        obs, _, nav_gt, fac_gt = load_sample(data_dir, rec, cache)
        shape = (obs.intrinsics.height, obs.intrinsics.width)
        if nav_gt.values.shape != shape or fac_gt.values.shape != shape:
            raise FormatError(f"sample {rec.get('id')!r} maps do not match its camera")
    return manifest


def _manifest_gt_params(manifest: dict) -> Tuple[NavGtParams, FacGtParams]:
    cfg = _require(manifest, "config", "manifest")
    try:
        nav = NavGtParams(**cfg["nav_params"])
        fac = FacGtParams(**cfg["fac_params"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest config lacks ground-truth parameters: {exc}") from exc
    return nav, fac


def _manifest_camera(manifest: dict) -> Tuple[CameraIntrinsics, float, float]:
    cfg = _require(manifest, "config", "manifest")
    try:
        intr = CameraIntrinsics(**cfg["intrinsics"])
        return intr, float(cfg["camera_height"]), float(cfg["camera_pitch"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest config lacks camera parameters: {exc}") from exc


# ---------------------------------------------------------------------------
# Predictors and benchmarking
# ---------------------------------------------------------------------------

PREDICTOR_NAMES = ("oracle", "noisy", "zero", "point", "toy", "external")


def load_noise_config(path: Path | str) -> NoiseParams:
    """NoiseParams from a TOML document whose keys mirror the field names."""
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"noise config is not valid TOML: {exc}") from exc
    allowed = {
        "peak_shift_sigma",
        "amplitude_range",
        "blur_radius",
        "false_positive_rate",
        "drop_rate",
        "seed",
    }
    unknown = set(data) - allowed
    if unknown:
        raise FormatError(f"unknown noise config keys: {sorted(unknown)}")
    if "amplitude_range" in data:
        data["amplitude_range"] = tuple(data["amplitude_range"])
    return NoiseParams(**data)


def toy_save(path: Path | str, model: ToyModel) -> None:
    payload = {"w_nav": model.w_nav.tolist(), "w_fac": model.w_fac.tolist()}
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def toy_load(path: Path | str) -> ToyModel:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return ToyModel(np.asarray(data["w_nav"]), np.asarray(data["w_fac"]))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed toy model file: {exc}") from exc


def make_predictor(
    name: str,
    noise: Optional[NoiseParams] = None,
    adapter_cmd: Optional[str | Sequence[str]] = None,
    model: Optional[ToyModel] = None,
    nav_params: NavGtParams = NavGtParams(),
    fac_params: FacGtParams = FacGtParams(),
    timeout: float = 30.0,
):
    """Instantiate a predictor by CLI name.

    The caller owns an external predictor's endpoint and must close it
    (`predictor.endpoint.close()`).
    """
    if name == "oracle":
        return OraclePredictor(nav_params, fac_params)
    if name == "noisy":
        return NoisyPredictor(noise if noise is not None else NoiseParams(), nav_params, fac_params)
    if name == "zero":
        return ZeroPredictor()
    if name == "point":
        return PointBaselinePredictor()
    if name == "toy":
        if model is None:
            raise ValueError("toy predictor needs a fitted model (run fit-toy first)")
        return model
    if name == "external":
        if not adapter_cmd:
            raise ValueError("external predictor needs --adapter-cmd")
        command = shlex.split(adapter_cmd) if isinstance(adapter_cmd, str) else list(adapter_cmd)
        return ExternalPredictor(ExternalEndpoint(command, timeout=timeout))
    raise ValueError(f"unknown predictor {name!r}; choose from {PREDICTOR_NAMES}")


class RecordExternalPredictor:
    """External predictor for benchmarking stored samples: sends the dataset's
    own depth/instance files and names the ground-truth maps in the metadata so
    loopback adapters can echo them."""

    def __init__(self, data_dir: Path | str, endpoint: ExternalEndpoint):
        self.root = Path(data_dir).resolve()
        self.endpoint = endpoint
        self._counter = 0

    def predict_record(self, record: dict, obs: Observation, instruction: Instruction) -> Prediction:
        self._counter += 1
        meta = build_wire_meta(
            self.root / record["scene"],
            obs.pose,
            obs.extrinsic.height,
            obs.extrinsic.pitch,
            obs.intrinsics,
            instruction,
            nav_gt=self.root / record["nav_gt"],
            fac_gt=self.root / record["fac_gt"],
        )
        meta_path = self.endpoint.workdir / f"meta-{self._counter}.json"
        meta_path.write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
        return external_predict_files(
            self.endpoint,
            obs.intrinsics.width,
            obs.intrinsics.height,
            instruction.text,
            self.root / record["depth"],
            self.root / record["instances"],
            meta_path,
        )


def split_records(manifest: dict, split: str) -> List[dict]:
    if split not in SPLIT_TAGS:
        raise ValueError(f"split must be one of {SPLIT_TAGS}, got {split!r}")
    records = [r for r in manifest["samples"] if r["split"] == split]
    if not records:
        raise EmptyDataset(f"no samples with split {split!r}")
    return records


def bench_run(
    data_dir: Path | str,
    predictor,
    split: str = "test_unseen",
    thresholds: Thresholds = Thresholds(),
    embodiment: Optional[Embodiment] = None,
) -> Tuple[MetricsReport, List[SampleJudgment]]:
    """Judge a predictor on every sample of one split and aggregate."""
    manifest = load_manifest(data_dir)
    nav_params, fac_params = _manifest_gt_params(manifest)
    records = split_records(manifest, split)
    cache: Dict[str, Scene] = {}
    judgments: List[SampleJudgment] = []
    for rec in records:
        obs, instruction, _, _ = load_sample(data_dir, rec, cache)
        if hasattr(predictor, "predict_record"):
            prediction = predictor.predict_record(rec, obs, instruction)
        else:
            prediction = predictor.predict(obs, instruction)
        judgments.append(
            judge_sample(
                obs,
                instruction,
                prediction,
                thresholds,
                embodiment,
                nav_params,
                fac_params,
            )
        )
    logger.info("benchmarked %d samples on %s", len(judgments), split)
    return aggregate(judgments, thresholds), judgments


def train_samples(
    data_dir: Path | str, split: str = "train_seen", limit: Optional[int] = None
) -> List[TrainSample]:
    manifest = load_manifest(data_dir)
    records = split_records(manifest, split)
    if limit is not None:
        records = records[:limit]
    cache: Dict[str, Scene] = {}
    out = []
    for rec in records:
        obs, instruction, nav_gt, fac_gt = load_sample(data_dir, rec, cache)
        out.append(TrainSample(obs, instruction, nav_gt, fac_gt))
    return out


# ---------------------------------------------------------------------------
# Closed-loop episodes
# ---------------------------------------------------------------------------


def _point_episode(
    scene: Scene,
    start: Pose,
    instruction: Instruction,
    embodiment: Embodiment,
    obs: Observation,
    confidence: float,
    nav_params: NavGtParams,
    max_steps: int,
    success_distance: float,
    split: str,
    seed: int,
) -> EpisodeResult:
    """Point-goal baseline: back-project the single predicted pixel and
    drive straight to it; success still requires ending near the true goal."""
    goal = standpoint_goal(scene, instruction.nav_target, nav_params)
    prediction = PointBaselinePredictor().predict(obs, instruction)
    peak = peak_extract(prediction.h_nav, confidence)
    point = pixel_to_world(obs, peak[0]) if peak is not None else None
    if point is None:
        return EpisodeResult(
            prediction_valid=False,
            success=False,
            final_distance=start.distance_to(*goal),
            steps=0,
            collided=False,
            embodiment=embodiment.name,
            split=split,
            seed=seed,
            final_pose=start,
        )
    result = waypoint_follow(
        scene,
        start,
        (point[0], point[1]),
        embodiment,
        max_steps=max_steps,
        goal_point=goal,
        split=split,
        seed=seed,
    )
    reached_goal = result.success and result.final_distance <= success_distance
    return replace(result, success=reached_goal and result.prediction_valid)


def episodes_run(
    data_dir: Path | str,
    predictor_name: str,
    embodiment: str = "jetbot",
    split: str = "test_unseen",
    episodes_per_scene: int = 2,
    seed: int = 0,
    noise: Optional[NoiseParams] = None,
    adapter_cmd: Optional[str] = None,
    model: Optional[ToyModel] = None,
    mppi: MppiParams = MppiParams(),
    field_params: FieldParams = FieldParams(),
    replan_period: int = 10,
    max_steps: int = 200,
    success_distance: float = 1.0,
    confidence: float = 0.5,
) -> List[EpisodeResult]:
    """Closed-loop benchmark over every scene of one split.

    Episode k of a scene starts at spawn k (mod the spawn count) with a
    deterministic derived seed and a reference instruction targeting a
    visible object.  The point baseline drives to its predicted pixel;
    heatmap predictors run the full perception-planning loop.
    """
    manifest = load_manifest(data_dir)
    nav_params, fac_params = _manifest_gt_params(manifest)
    intr, cam_height, cam_pitch = _manifest_camera(manifest)
    if split not in SPLIT_TAGS:
        raise ValueError(f"split must be one of {SPLIT_TAGS}, got {split!r}")
    entries = [e for e in manifest["scenes"] if e["split"] == split]
    if not entries:
        raise EmptyDataset(f"no scenes with split {split!r}")
    if embodiment not in EMBODIMENTS:
        raise ValueError(f"unknown embodiment {embodiment!r}")
    emb = EMBODIMENTS[embodiment]
    short = _SHORT_SPLIT[split]

    predictor = None
    if predictor_name != "point":
        predictor = make_predictor(
            predictor_name,
            noise=noise,
            adapter_cmd=adapter_cmd,
            model=model,
            nav_params=nav_params,
            fac_params=fac_params,
        )
    results: List[EpisodeResult] = []
    try:
        for si, entry in enumerate(entries):
            scene = load_scene(Path(data_dir) / entry["path"])
            if not scene.objects:
                raise NoObjects(f"scene {entry['path']} has no objects to target")
            for k in range(episodes_per_scene):
                ep_seed = _derive_seed(seed, 3, si, k)
                rng = np.random.default_rng(ep_seed)
                start = scene.spawns[k % len(scene.spawns)]
                obs0 = render(scene, Extrinsic(start, cam_height, cam_pitch), intr)
                visible = {int(v) for v in np.unique(obs0.instance_ids) if v > 0}
                pool = [o for o in scene.objects if o.id in visible] or list(scene.objects)
                target = pool[int(rng.integers(len(pool)))]
                instruction = Instruction(f"go to <ref:{target.id}>", nav_target=target.id)
                if predictor_name == "point":
                    result = _point_episode(
                        scene,
                        start,
                        instruction,
                        emb,
                        obs0,
                        confidence,
                        nav_params,
                        max_steps,
                        success_distance,
                        short,
                        ep_seed,
                    )
                else:
                    result = run_episode(
                        scene,
                        start,
                        instruction,
                        predictor,
                        emb,
                        mppi=replace(mppi, seed=ep_seed),
                        field_params=field_params,
                        intrinsics=intr,
                        camera_height=cam_height,
                        camera_pitch=cam_pitch,
                        nav_params=nav_params,
                        replan_period=replan_period,
                        max_steps=max_steps,
                        success_distance=success_distance,
                        confidence_threshold=confidence,
                        split=short,
                    )
                results.append(result)
                logger.debug(
                    "episode scene=%s k=%d success=%s", entry["path"], k, result.success
                )
    finally:
        if predictor is not None and hasattr(predictor, "endpoint"):
            predictor.endpoint.close()
    return results


# ---------------------------------------------------------------------------
# Image emission (PGM/PPM, no imaging dependency)
# ---------------------------------------------------------------------------


def _quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 so that only exactly 1.0 hits 255."""
    arr = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(arr * 255.0), 0.0, 255.0).astype(np.uint8)


def write_pgm(path: Path | str, values: np.ndarray) -> None:
    """8-bit binary PGM; intensity floor(value * 255)."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got shape {arr.shape}")
    q = _quantize(arr)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def read_pgm(path: Path | str) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise FormatError(f"{path} is not an 8-bit binary PGM")
    try:
        w, h = (int(t) for t in parts[1].split())
    except ValueError as exc:
        raise FormatError(f"bad PGM dimensions in {path}") from exc
    data = parts[3]
    if len(data) != w * h:
        raise FormatError(f"PGM payload is {len(data)} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_ppm(path: Path | str, rgb: np.ndarray) -> None:
    """8-bit binary PPM from an (H, W, 3) uint8 array."""
    arr = np.ascontiguousarray(rgb, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"PPM needs an (H, W, 3) array, got shape {arr.shape}")
    header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


_COLOR_FREE = (255, 255, 255)
_COLOR_WALL = (64, 64, 64)
_COLOR_OBJECT = (128, 96, 64)
_COLOR_TRAJ = (220, 40, 40)
_COLOR_START = (40, 200, 40)
_COLOR_GOAL = (40, 80, 220)


def _scene_image(scene: Scene) -> np.ndarray:
    img = np.empty((scene.grid.height, scene.grid.width, 3), dtype=np.uint8)
    img[:] = _COLOR_FREE
    img[scene.wall_mask] = _COLOR_WALL
    img[scene.object_mask] = _COLOR_OBJECT
    return img


def _paint(img: np.ndarray, scene: Scene, x: float, y: float, color) -> None:
    cell = scene.grid.cell_of(x, y)
    if cell is not None:
        img[cell] = color


def render_maps(record_path: Path | str, out_dir: Path | str, seed: int = 0) -> Dict[str, Path]:
    """Emit PGM heatmaps, the projected field, and a PPM trajectory overlay
    for one dataset sample.  Returns the written paths keyed by name."""
    record_path = Path(record_path)
    try:
        record = json.loads(record_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read sample record {record_path}: {exc}") from exc
    root = record_path.parents[2]
    obs, instruction, nav_gt, fac_gt = load_sample(root, record)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    paths = {
        "nav": out / "nav.pgm",
        "fac": out / "fac.pgm",
        "field": out / "field.pgm",
        "trajectory": out / "trajectory.ppm",
    }
    write_pgm(paths["nav"], nav_gt.values)
    write_pgm(paths["fac"], fac_gt.values)
    field = project_field(obs, Prediction(nav_gt, fac_gt))
    write_pgm(paths["field"], field.m_nav)

    img = _scene_image(obs.scene)
    if instruction.nav_target is not None and not nav_gt.is_negative():
        traj, _ = mppi_plan(
            field,
            obs.pose,
            EMBODIMENTS["jetbot"],
            MppiParams(samples=64, horizon=30, iterations=1, seed=seed),
        )
        for pose in traj.poses:
            _paint(img, obs.scene, pose.x, pose.y, _COLOR_TRAJ)
        goal = standpoint_goal(obs.scene, instruction.nav_target)
        _paint(img, obs.scene, goal[0], goal[1], _COLOR_GOAL)
    _paint(img, obs.scene, obs.pose.x, obs.pose.y, _COLOR_START)
    write_ppm(paths["trajectory"], img)
    return paths


# ---------------------------------------------------------------------------
# Adapter conformance check
# ---------------------------------------------------------------------------

_CHECK_CAMERA = CameraIntrinsics(
    width=48, height=36, fx=36.0, fy=36.0, cx=23.5, cy=17.5, max_range=10.0
)


def serve_check(adapter_cmd: str | Sequence[str], timeout: float = 30.0) -> str:
    """Spawn an adapter and verify protocol conformance on live requests.

    Checks the handshake, id echo, response shape, heatmap headers and value
    ranges, for both a referenced-object and an absent-label instruction.  The
    request metadata names freshly computed ground-truth maps so loopback
    adapters can answer by echoing them.  Returns the adapter's advertised
    name; raises on any violation.
    """
    scene = gen_scene(SceneGenParams(room_extent=(3.6, 4.2), object_count=(2, 3)), seed=11)
    start = scene.spawns[0]
    obs = render(scene, Extrinsic(start), _CHECK_CAMERA)
    target = scene.objects[0]
    cases = [
        Instruction(f"go to <ref:{target.id}>", nav_target=target.id, fac_target=target.id),
        Instruction("go to the unicorn"),
    ]
    command = shlex.split(adapter_cmd) if isinstance(adapter_cmd, str) else list(adapter_cmd)
    by_id = {obj.id: obj for obj in scene.objects}
    with ExternalEndpoint(command, timeout=timeout) as endpoint:
        work = endpoint.workdir
        depth_path = work / "check.dpt"
        inst_path = work / "check.seg"
        scene_path = work / "check.scene.json"
        save_depth(depth_path, obs.depth.astype(np.float32))
        save_instances(inst_path, obs.instance_ids)
        save_scene(scene, scene_path)
        for idx, instruction in enumerate(cases):
            nav_gt = gen_nav_gt(obs, by_id.get(instruction.nav_target))
            fac_gt = gen_fac_gt(obs, by_id.get(instruction.fac_target))
            nav_path = work / f"check-{idx}-nav.hmf"
            fac_path = work / f"check-{idx}-fac.hmf"
            save_heatmap(nav_path, nav_gt)
            save_heatmap(fac_path, fac_gt)
            meta = build_wire_meta(
                scene_path,
                obs.pose,
                obs.extrinsic.height,
                obs.extrinsic.pitch,
                obs.intrinsics,
                instruction,
                nav_gt=nav_path,
                fac_gt=fac_path,
            )
            meta_path = work / f"check-{idx}.meta.json"
            meta_path.write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
            # external_predict_files enforces shapes, kinds, and value ranges.
            external_predict_files(
                endpoint,
                obs.intrinsics.width,
                obs.intrinsics.height,
                instruction.text,
                depth_path,
                inst_path,
                meta_path,
            )
        return endpoint.name
