"""Pluggable heatmap predictors.

All predictors share one contract: given an Observation and an Instruction,
return a Prediction holding one standpoint map and one facing map at the
observation's resolution.  Implementations range from the ground-truth oracle
to a child process speaking the heatnav/1 wire protocol.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from queue import Empty, Queue
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.special import expit

from .errors import (
    AdapterError,
    AdapterTimeout,
    BadHeatmap,
    EmptyDataset,
    ProtocolViolation,
    UnknownInstance,
)
from .heatmap import (
    FAC,
    FacGtParams,
    Heatmap,
    NAV,
    NavGtParams,
    gen_fac_gt,
    gen_nav_gt,
    load_heatmap,
)
from .losses import AnnealSchedule, FocalParams, LossWeights, anneal, bce_nav, focal_fac
from .sensor import CameraIntrinsics, Observation, save_depth, save_instances
from .world import FLOOR_ID, ObjectInstance, Pose, Scene

PROTO = "heatnav/1"

_REF_RE = re.compile(r"<ref:(\d+)>")


@dataclass(frozen=True)
class Instruction:
    text: str
    nav_target: Optional[int] = None
    fac_target: Optional[int] = None
    ref_tokens: Tuple[int, ...] = ()

    def __post_init__(self):
        embedded = tuple(int(m) for m in _REF_RE.findall(self.text))
        if self.ref_tokens == ():
            object.__setattr__(self, "ref_tokens", embedded)
        elif tuple(self.ref_tokens) != embedded:
            raise ValueError("ref_tokens must match the <ref:ID> markers in text")


def parse_ref_tokens(text: str) -> Tuple[int, ...]:
    return tuple(int(m) for m in _REF_RE.findall(text))


@dataclass(frozen=True)
class Prediction:
    h_nav: Heatmap
    h_fac: Heatmap
    latency: float = 0.0


def _resolve(scene: Scene, object_id: Optional[int]) -> Optional[ObjectInstance]:
    if object_id is None:
        return None
    return scene.object_by_id(object_id)


def _check_instruction(scene: Scene, instruction: Instruction) -> None:
    for ref in instruction.ref_tokens:
        if not scene.has_object(ref):
            raise UnknownInstance(f"ref token <ref:{ref}> has no instance in the scene")


class OraclePredictor:
    """Returns the ground-truth generators' output verbatim."""

    def __init__(self, nav_params: NavGtParams = NavGtParams(), fac_params: FacGtParams = FacGtParams()):
        self.nav_params = nav_params
        self.fac_params = fac_params

    def predict(self, obs: Observation, instruction: Instruction) -> Prediction:
        t0 = time.perf_counter()
        _check_instruction(obs.scene, instruction)
        h_nav = gen_nav_gt(obs, _resolve(obs.scene, instruction.nav_target), self.nav_params)
        h_fac = gen_fac_gt(obs, _resolve(obs.scene, instruction.fac_target), self.fac_params)
        return Prediction(h_nav, h_fac, time.perf_counter() - t0)


def oracle_predict(obs: Observation, instruction: Instruction) -> Prediction:
    return OraclePredictor().predict(obs, instruction)


class ZeroPredictor:
    """Never answers: both maps all-zero."""

    def predict(self, obs: Observation, instruction: Instruction) -> Prediction:
        t0 = time.perf_counter()
        shape = obs.depth.shape
        zero = np.zeros(shape, dtype=np.float32)
        return Prediction(Heatmap(zero, NAV), Heatmap(zero, FAC), time.perf_counter() - t0)


def zero_predict(obs: Observation, instruction: Instruction) -> Prediction:
    return ZeroPredictor().predict(obs, instruction)


class PointBaselinePredictor:
    """Single-waypoint foil: a 1 px spike at the target mask centroid.

    The spike sits on the object itself, not on a standpoint beside it, which
    is exactly the failure mode the standpoint maps are meant to avoid.
    """

    def __init__(self, fac_params: FacGtParams = FacGtParams()):
        self.fac_params = fac_params

    def predict(self, obs: Observation, instruction: Instruction) -> Prediction:
        t0 = time.perf_counter()
        _check_instruction(obs.scene, instruction)
        target = _resolve(obs.scene, instruction.nav_target)
        values = np.zeros(obs.depth.shape, dtype=np.float32)
        if target is not None:
            mask = obs.instance_ids == target.id
            if mask.any():
                vs, us = np.nonzero(mask)
                u0 = int(math.floor(us.mean() + 0.5))
                v0 = int(math.floor(vs.mean() + 0.5))
                values[v0, u0] = 1.0
        h_fac = gen_fac_gt(obs, _resolve(obs.scene, instruction.fac_target), self.fac_params)
        return Prediction(Heatmap(values, NAV), h_fac, time.perf_counter() - t0)


def point_baseline_predict(obs: Observation, instruction: Instruction) -> Prediction:
    return PointBaselinePredictor().predict(obs, instruction)


@dataclass(frozen=True)
class NoiseParams:
    peak_shift_sigma: float = 0.0
    amplitude_range: Tuple[float, float] = (1.0, 1.0)
    blur_radius: int = 0
    false_positive_rate: float = 0.0
    drop_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.amplitude_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("amplitude_range must satisfy 0 <= lo <= hi <= 1")
        if not (0.0 <= self.false_positive_rate <= 1.0 and 0.0 <= self.drop_rate <= 1.0):
            raise ValueError("rates must lie in [0, 1]")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be >= 0")
        if self.peak_shift_sigma < 0:
            raise ValueError("peak_shift_sigma must be >= 0")


def _call_rng(noise_seed: int, obs: Observation, instruction: Instruction) -> np.random.Generator:
    """Process-independent per-call stream derived by hashing the call identity."""
    pose = obs.pose
    key = "|".join(
        [
            str(noise_seed),
            f"{pose.x:.9f},{pose.y:.9f},{pose.theta:.9f}",
            str(instruction.nav_target),
            str(instruction.fac_target),
            instruction.text,
        ]
    )
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


def _shift_map(values: np.ndarray, dy: int, dx: int) -> np.ndarray:
    if dy == 0 and dx == 0:
        return values
    out = np.zeros_like(values)
    h, w = values.shape
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = values[src_y, src_x]
    return out


def _gauss_blob(shape: Tuple[int, int], center_uv: Tuple[int, int], sigma: float) -> np.ndarray:
    uu, vv = np.meshgrid(np.arange(shape[1]), np.arange(shape[0]))
    sq = (uu - center_uv[0]) ** 2 + (vv - center_uv[1]) ** 2
    return np.exp(-sq / (2.0 * sigma * sigma)).astype(np.float32)


class NoisyPredictor:
    """Oracle corrupted by seeded drops, false answers, peak shifts, dimming,
    and blur; identical to the oracle when every knob is at its identity."""

    def __init__(
        self,
        noise: NoiseParams,
        nav_params: NavGtParams = NavGtParams(),
        fac_params: FacGtParams = FacGtParams(),
    ):
        self.noise = noise
        self.oracle = OraclePredictor(nav_params, fac_params)

    def _corrupt(self, h: Heatmap, obs: Observation, rng: np.random.Generator) -> Heatmap:
        noise = self.noise
        values = h.values
        positive = bool(values.any())
        if positive and rng.uniform() < noise.drop_rate:
            return Heatmap(np.zeros_like(values), h.kind)
        if not positive and rng.uniform() < noise.false_positive_rate:
            floor = np.argwhere(obs.instance_ids == FLOOR_ID)
            if len(floor):
                v0, u0 = floor[rng.integers(len(floor))]
            else:
                v0 = int(rng.integers(h.height))
                u0 = int(rng.integers(h.width))
            values = _gauss_blob(values.shape, (int(u0), int(v0)), 3.0)
            positive = True
        if positive and noise.peak_shift_sigma > 0:
            flat = int(np.argmax(values))
            pv, pu = divmod(flat, h.width)
            dx, dy = rng.normal(0.0, noise.peak_shift_sigma, size=2)
            dx = int(np.clip(round(dx), -pu, h.width - 1 - pu))
            dy = int(np.clip(round(dy), -pv, h.height - 1 - pv))
            values = _shift_map(values, dy, dx)
        lo, hi = noise.amplitude_range
        scale = rng.uniform(lo, hi) if hi > lo else lo
        if scale != 1.0:
            values = (values * np.float32(scale)).astype(np.float32)
        if noise.blur_radius > 0:
            size = 2 * noise.blur_radius + 1
            values = uniform_filter(values.astype(np.float64), size=size, mode="constant")
            values = np.clip(values, 0.0, 1.0).astype(np.float32)
        return Heatmap(values, h.kind)

    def predict(self, obs: Observation, instruction: Instruction) -> Prediction:
        t0 = time.perf_counter()
        clean = self.oracle.predict(obs, instruction)
        rng = _call_rng(self.noise.seed, obs, instruction)
        h_nav = self._corrupt(clean.h_nav, obs, rng)
        h_fac = self._corrupt(clean.h_fac, obs, rng)
        return Prediction(h_nav, h_fac, time.perf_counter() - t0)


def noisy_predict(obs: Observation, instruction: Instruction, noise: NoiseParams) -> Prediction:
    return NoisyPredictor(noise).predict(obs, instruction)


# ---------------------------------------------------------------------------
# Toy trainable predictor: independent logistic heads on 7 per-pixel features.
# ---------------------------------------------------------------------------

N_FEATURES = 7


@dataclass
class TrainSample:
    obs: Observation
    instruction: Instruction
    nav_gt: Heatmap
    fac_gt: Heatmap


def _mask_distance_feature(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    diag = math.hypot(h - 1, w - 1)
    if not mask.any():
        return np.ones((h, w))
    from scipy.ndimage import distance_transform_edt

    dist = distance_transform_edt(~mask)
    return np.clip(dist / diag, 0.0, 1.0)


def toy_features(obs: Observation, target_id: Optional[int]) -> np.ndarray:
    """(H, W, 7) feature tensor: bias, coords, depth, target mask, floor, range."""
    h, w = obs.depth.shape
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    x_norm, y_norm = np.meshgrid(xs, ys)
    depth_norm = np.clip(
        np.where(np.isfinite(obs.depth), obs.depth, obs.intrinsics.max_range)
        / obs.intrinsics.max_range,
        0.0,
        1.0,
    )
    mask = obs.instance_ids == target_id if target_id is not None else np.zeros((h, w), dtype=bool)
    feats = np.stack(
        [
            np.ones((h, w)),
            x_norm,
            y_norm,
            depth_norm,
            mask.astype(np.float64),
            (obs.instance_ids == FLOOR_ID).astype(np.float64),
            _mask_distance_feature(mask),
        ],
        axis=-1,
    )
    return feats


@dataclass
class ToyModel:
    w_nav: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    w_fac: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))

    def __post_init__(self):
        self.w_nav = np.asarray(self.w_nav, dtype=np.float64)
        self.w_fac = np.asarray(self.w_fac, dtype=np.float64)
        if self.w_nav.shape != (N_FEATURES,) or self.w_fac.shape != (N_FEATURES,):
            raise ValueError(f"weight vectors must have shape ({N_FEATURES},)")
        if not (np.isfinite(self.w_nav).all() and np.isfinite(self.w_fac).all()):
            raise ValueError("weights must be finite")

    def logits(self, obs: Observation, instruction: Instruction) -> Tuple[np.ndarray, np.ndarray]:
        nav = toy_features(obs, instruction.nav_target) @ self.w_nav
        fac = toy_features(obs, instruction.fac_target) @ self.w_fac
        return nav, fac

    def predict(self, obs: Observation, instruction: Instruction) -> Prediction:
        t0 = time.perf_counter()
        _check_instruction(obs.scene, instruction)
        nav_z, fac_z = self.logits(obs, instruction)
        h_nav = Heatmap(expit(nav_z).astype(np.float32), NAV)
        h_fac = Heatmap(expit(fac_z).astype(np.float32), FAC)
        return Prediction(h_nav, h_fac, time.perf_counter() - t0)


@dataclass(frozen=True)
class TraceRow:
    step: int
    w_nav: float
    w_fac: float
    loss_nav: float
    loss_fac: float
    loss: float


def toy_fit(
    samples: Sequence[TrainSample],
    schedule: AnnealSchedule,
    learning_rate: float = 0.5,
    focal: FocalParams = FocalParams(),
) -> Tuple[ToyModel, List[TraceRow]]:
    """Full-batch gradient descent on the combined loss with annealed weights.

    Deterministic: weights start at zero and the data order is the caller's.
    """
    if not samples:
        raise EmptyDataset("toy_fit needs at least one sample")
    if not any(not s.nav_gt.is_negative() or not s.fac_gt.is_negative() for s in samples):
        raise EmptyDataset("toy_fit needs at least one positive sample")
    feats_nav = [toy_features(s.obs, s.instruction.nav_target) for s in samples]
    feats_fac = [toy_features(s.obs, s.instruction.fac_target) for s in samples]
    model = ToyModel()
    trace: List[TraceRow] = []
    n = len(samples)
    for step in range(schedule.total_steps):
        weights = anneal(step, schedule)
        loss_nav_total = 0.0
        loss_fac_total = 0.0
        grad_nav = np.zeros(N_FEATURES)
        grad_fac = np.zeros(N_FEATURES)
        for sample, f_nav, f_fac in zip(samples, feats_nav, feats_fac):
            z_nav = f_nav @ model.w_nav
            z_fac = f_fac @ model.w_fac
            l_nav, g_nav = bce_nav(z_nav, sample.nav_gt)
            l_fac, g_fac = focal_fac(z_fac, sample.fac_gt, focal)
            loss_nav_total += l_nav
            loss_fac_total += l_fac
            grad_nav += np.tensordot(g_nav, f_nav, axes=([0, 1], [0, 1]))
            grad_fac += np.tensordot(g_fac, f_fac, axes=([0, 1], [0, 1]))
        loss_nav_total /= n
        loss_fac_total /= n
        total = weights.w_nav * loss_nav_total + weights.w_fac * loss_fac_total
        trace.append(
            TraceRow(step, weights.w_nav, weights.w_fac, loss_nav_total, loss_fac_total, total)
        )
        model.w_nav = model.w_nav - learning_rate * weights.w_nav * grad_nav / n
        model.w_fac = model.w_fac - learning_rate * weights.w_fac * grad_fac / n
    return model, trace


# ---------------------------------------------------------------------------
# External predictor: child process speaking line-delimited JSON (heatnav/1).
# ---------------------------------------------------------------------------


class ExternalEndpoint:
    """One adapter child process with a single in-flight request at a time."""

    def __init__(self, command: Sequence[str], timeout: float = 30.0, workdir: Optional[Path] = None):
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        self.timeout = timeout
        self.workdir = Path(workdir) if workdir is not None else Path(tempfile.mkdtemp(prefix="heatnav-ep-"))
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._next_id = 1
        self._scene_paths: Dict[int, Path] = {}
        self._proc = subprocess.Popen(
            list(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
            cwd=str(self.workdir),
        )
        self._lines: Queue = Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        handshake = self._read_json(self.timeout)
        if handshake.get("proto") != PROTO:
            self.close()
            raise ProtocolViolation(f"bad handshake: {handshake!r}")
        self.name = str(handshake.get("name", ""))

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _read_json(self, timeout: float) -> dict:
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise AdapterTimeout(f"no adapter response within {timeout} s")
            try:
                line = self._lines.get(timeout=remaining)
            except Empty:
                raise AdapterTimeout(f"no adapter response within {timeout} s") from None
            if line is None:
                raise ProtocolViolation("adapter closed its output stream")
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ProtocolViolation(f"adapter wrote invalid JSON: {line[:200]!r}") from exc
            if not isinstance(data, dict):
                raise ProtocolViolation("adapter lines must be JSON objects")
            return data

    def _scene_path(self, scene: Scene) -> Path:
        from .world import save_scene

        key = id(scene)
        path = self._scene_paths.get(key)
        if path is None:
            path = self.workdir / f"scene-{len(self._scene_paths)}.scene.json"
            save_scene(scene, path)
            self._scene_paths[key] = path
        return path

    def request(
        self,
        width: int,
        height: int,
        instruction_text: str,
        depth_path: Path | str,
        instances_path: Path | str,
        meta_path: Path | str,
    ) -> Tuple[Path, Path]:
        """Send one request and wait for its matching response."""
        with self._lock:
            if self._proc.poll() is not None:
                raise ProtocolViolation("adapter process has exited")
            req_id = self._next_id
            self._next_id += 1
            payload = {
                "id": req_id,
                "width": width,
                "height": height,
                "instruction": instruction_text,
                "depth": str(depth_path),
                "instances": str(instances_path),
                "meta": str(meta_path),
            }
            assert self._proc.stdin is not None
            self._proc.stdin.write(json.dumps(payload) + "\n")
            self._proc.stdin.flush()
            response = self._read_json(self.timeout)
            if "id" not in response:
                raise ProtocolViolation("response missing id")
            if response["id"] != req_id:
                raise ProtocolViolation(
                    f"out-of-order response: expected id {req_id}, got {response['id']}"
                )
            if "error" in response:
                raise AdapterError(str(response["error"]))
            if "nav" not in response or "fac" not in response:
                raise ProtocolViolation("response must name nav and fac files")
            nav = Path(str(response["nav"]))
            fac = Path(str(response["fac"]))
            if not nav.is_absolute():
                nav = self.workdir / nav
            if not fac.is_absolute():
                fac = self.workdir / fac
            return nav, fac

    def close(self) -> None:
        if self._proc.poll() is None:
            if self._proc.stdin is not None:
                try:
                    self._proc.stdin.close()
                except OSError:
                    pass
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _load_checked(path: Path, expected_shape: Tuple[int, int], kind: str) -> Heatmap:
    try:
        h = load_heatmap(path)
    except FileNotFoundError as exc:
        raise ProtocolViolation(f"adapter named a missing file: {path}") from exc
    if h.values.shape != expected_shape:
        raise BadHeatmap(f"adapter {kind} map is {h.values.shape}, expected {expected_shape}")
    return h


def external_predict_files(
    endpoint: ExternalEndpoint,
    width: int,
    height: int,
    instruction_text: str,
    depth_path: Path | str,
    instances_path: Path | str,
    meta_path: Path | str,
) -> Prediction:
    """Wire-level call when the sensor files already exist on disk."""
    t0 = time.perf_counter()
    nav_path, fac_path = endpoint.request(
        width, height, instruction_text, depth_path, instances_path, meta_path
    )
    h_nav = _load_checked(nav_path, (height, width), "nav")
    h_fac = _load_checked(fac_path, (height, width), "fac")
    if h_nav.kind != NAV or h_fac.kind != FAC:
        raise BadHeatmap("adapter returned heatmaps with swapped or wrong kinds")
    return Prediction(h_nav, h_fac, time.perf_counter() - t0)


def build_wire_meta(
    scene_path: Path | str,
    pose: Pose,
    camera_height: float,
    camera_pitch: float,
    intrinsics: CameraIntrinsics,
    instruction: Instruction,
    nav_gt: Optional[Path | str] = None,
    fac_gt: Optional[Path | str] = None,
) -> dict:
    """Request metadata document.  Ground-truth paths are optional; loopback
    adapters echo them back, heuristic adapters ignore them."""
    meta = {
        "scene": str(scene_path),
        "pose": {"x": pose.x, "y": pose.y, "theta": pose.theta},
        "camera": {
            "height": camera_height,
            "pitch": camera_pitch,
            "fx": intrinsics.fx,
            "fy": intrinsics.fy,
            "cx": intrinsics.cx,
            "cy": intrinsics.cy,
            "max_range": intrinsics.max_range,
        },
        "nav_target": instruction.nav_target,
        "fac_target": instruction.fac_target,
    }
    if nav_gt is not None:
        meta["nav_gt"] = str(nav_gt)
    if fac_gt is not None:
        meta["fac_gt"] = str(fac_gt)
    return meta


class ExternalPredictor:
    """Writes the observation to disk and queries the adapter process."""

    def __init__(self, endpoint: ExternalEndpoint):
        self.endpoint = endpoint

    def predict(self, obs: Observation, instruction: Instruction) -> Prediction:
        endpoint = self.endpoint
        req_dir = endpoint.workdir
        tag = f"req-{endpoint._next_id}"
        depth_path = req_dir / f"{tag}.dpt"
        inst_path = req_dir / f"{tag}.seg"
        meta_path = req_dir / f"{tag}.meta.json"
        save_depth(depth_path, obs.depth.astype(np.float32))
        save_instances(inst_path, obs.instance_ids)
        scene_path = endpoint._scene_path(obs.scene)
        meta = build_wire_meta(
            scene_path,
            obs.pose,
            obs.extrinsic.height,
            obs.extrinsic.pitch,
            obs.intrinsics,
            instruction,
        )
        meta_path.write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
        return external_predict_files(
            endpoint,
            obs.intrinsics.width,
            obs.intrinsics.height,
            instruction.text,
            depth_path,
            inst_path,
            meta_path,
        )


def external_predict(obs: Observation, instruction: Instruction, endpoint: ExternalEndpoint) -> Prediction:
    return ExternalPredictor(endpoint).predict(obs, instruction)
