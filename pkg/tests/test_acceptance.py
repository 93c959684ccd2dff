"""Release gate: every published numeric target checked end to end.

One test per criterion, each at its stated tolerance, each announcing a
single `[criterion NN] PASS/FAIL` line on the real stdout so a log scan
shows the whole scoreboard even under output capture.  Numeric targets
are pinned as constants next to the test that enforces them; independent
oracles are imported from the sibling unit-test modules rather than
re-derived here.
"""
from __future__ import annotations

import json
import math
import time
from contextlib import contextmanager
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from heatnav.cli import main
from heatnav.evaluation import (
    EpisodeResult,
    SampleJudgment,
    Thresholds,
    aggregate,
    episode_metrics,
    load_report,
)
from heatnav.heatmap import NavGtParams, gen_fac_gt, gen_nav_gt, peak_extract
from heatnav.losses import AnnealSchedule, bce_nav, focal_fac
from heatnav.pipeline import (
    BuildParams,
    SceneGenParams,
    build_dataset,
    episodes_run,
    gen_scene,
    train_samples,
)
from heatnav.planner import MppiParams, mppi_plan
from heatnav.predictors import toy_fit
from heatnav.sensor import CameraIntrinsics, Extrinsic, load_depth, save_depth, render
from heatnav.sensor import load_instances, save_instances, pixel_to_world
from heatnav.heatmap import load_heatmap, save_heatmap
from heatnav.world import EMBODIMENTS, FLOOR_ID, Pose, is_traversable, load_scene, save_scene

import test_heatmap as heat_oracle
import test_pipeline as pipe_helpers
import test_planner as plan_oracle

ROOT = Path(__file__).resolve().parents[1]
REFERENCE_ADAPTER = ROOT / "adapter" / "dist" / "main.js"

# One line per criterion; conftest echoes this in the terminal summary where
# pytest's capture cannot swallow it.
SCOREBOARD: list = []


def _note(text: str) -> None:
    SCOREBOARD.append(text)
    print(text, flush=True)


@contextmanager
def criterion(num: int, name: str):
    try:
        yield
    except BaseException:
        _note(f"[criterion {num:02d}] FAIL {name}")
        raise
    _note(f"[criterion {num:02d}] PASS {name}")


# ---------------------------------------------------------------------------
# Shared dataset: the oracle-ceiling benchmark (criteria 1, 6, 10)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ceiling(tmp_path_factory):
    root = tmp_path_factory.mktemp("ceiling")
    data = root / "data"
    oracle_out = root / "oracle_out"
    t0 = time.monotonic()
    rc = main(
        ["gen-data", "--out", str(data), "--scenes", "20", "--samples-per-scene", "10", "--seed", "12"]
    )
    assert rc == 0
    rc = main(
        ["bench", "--data", str(data), "--out", str(oracle_out), "--predictor", "oracle", "--format", "json"]
    )
    elapsed = time.monotonic() - t0
    assert rc == 0
    payload = json.loads((oracle_out / "metrics.json").read_text(encoding="ascii"))
    return SimpleNamespace(
        data=data, oracle_out=oracle_out, elapsed=elapsed, metrics=payload["metrics"]
    )


CEILING_MSE_LIMIT = 0.05  # one grid cell
CEILING_TIME_LIMIT = 120.0


def test_criterion_01_oracle_ceiling(ceiling):
    with criterion(1, "oracle ceiling: perfect detection on a fresh 20x10 dataset"):
        m = ceiling.metrics
        assert m["nav_p"] == 1.0
        assert m["nav_r"] == 1.0
        assert m["nav_f1"] == 1.0
        assert m["ar"] == 1.0
        assert m["mse"] <= CEILING_MSE_LIMIT
        assert ceiling.elapsed < CEILING_TIME_LIMIT


# ---------------------------------------------------------------------------
# Criterion 2: analytic loss gradients vs central finite differences
# ---------------------------------------------------------------------------

GRAD_INSTANCES = 50
GRAD_TOL = 1e-6
SPOT_TOL = 1e-9
_FD_STEP = 1e-5


def _central_diff(fn, logits):
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        bump = logits.copy()
        bump[idx] += _FD_STEP
        hi = fn(bump)
        bump[idx] -= 2.0 * _FD_STEP
        lo = fn(bump)
        num[idx] = (hi - lo) / (2.0 * _FD_STEP)
    return num


def test_criterion_02_loss_gradients():
    with criterion(2, "loss gradients match finite differences; spot values exact"):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(GRAD_INSTANCES):
            logits = rng.normal(0.0, 2.0, (8, 8))
            y = rng.uniform(0.0, 1.0, (8, 8))
            g = rng.uniform(0.0, 1.0, (8, 8))

            _, grad = bce_nav(logits, y)
            num = _central_diff(lambda z: bce_nav(z, y)[0], logits)
            worst = max(worst, float(np.abs(grad - num).max()))

            _, grad = focal_fac(logits, g)
            num = _central_diff(lambda z: focal_fac(z, g)[0], logits)
            worst = max(worst, float(np.abs(grad - num).max()))
        assert worst < GRAD_TOL

        # Closed-form values at p = 0.5 (zero logits).
        loss, _ = bce_nav(np.zeros((2, 2)), np.ones((2, 2)))
        assert abs(loss - math.log(2.0)) < SPOT_TOL
        loss, _ = focal_fac(np.zeros((2, 2)), np.ones((2, 2)))
        assert abs(loss - 0.25 * math.log(2.0)) < SPOT_TOL


# ---------------------------------------------------------------------------
# Criterion 3: ground-truth heatmaps vs brute-force oracle + invariants
# ---------------------------------------------------------------------------

BRUTE_SCENES = 10
BRUTE_TOL = 1e-6
INVARIANT_SAMPLES = 1000
_GATE_SCENES = SceneGenParams(room_extent=(3.6, 4.6), object_count=(1, 3))


def test_criterion_03_gt_oracle_equivalence():
    with criterion(3, "nav ground truth equals brute-force oracle; invariants on 1000 samples"):
        cam = heat_oracle.CAM16
        params = NavGtParams()
        positives = 0
        for seed in range(BRUTE_SCENES):
            scene = gen_scene(_GATE_SCENES, seed=300 + seed)
            obs = render(scene, Extrinsic(scene.spawns[0]), cam)
            target = scene.objects[0]
            got = gen_nav_gt(obs, target, params)
            brute = heat_oracle.nav_gt_brute(obs, target, params, heat_oracle.rect_distance_clamp)
            assert float(np.abs(got.values - brute).max()) < BRUTE_TOL
            if got.values.max() > 0:
                positives += 1
        assert positives >= 3  # the sweep must exercise non-trivial maps

        rng = np.random.default_rng(9)
        nav_pos = fac_pos = 0
        embodiments = tuple(EMBODIMENTS.values())
        for i in range(INVARIANT_SAMPLES):
            if i % 4 == 0:
                scene = gen_scene(_GATE_SCENES, seed=1000 + i // 4)
            pose = scene.spawns[i % len(scene.spawns)]
            obs = render(scene, Extrinsic(pose), cam)
            visible = [o for o in scene.objects if (obs.instance_ids == o.id).any()]
            target = visible[rng.integers(len(visible))] if visible else scene.objects[0]
            nav = gen_nav_gt(obs, target, params)
            fac = gen_fac_gt(obs, target)

            # Zero off the traversable floor.
            assert (nav.values[obs.instance_ids != FLOOR_ID] == 0.0).all()

            mask = nav.values > 0.0
            if mask.any():
                nav_pos += 1
                vs, us = np.nonzero(mask)
                dists = np.empty(len(us))
                for k, (u, v) in enumerate(zip(us, vs)):
                    point = pixel_to_world(obs, (int(u), int(v)))
                    assert point is not None
                    dists[k] = heat_oracle.rect_distance_clamp(
                        point[0], point[1], target.footprint
                    )
                order = np.argsort(dists)
                # Values decay monotonically with distance to the target.
                assert (np.diff(nav.values[mask][order]) <= 1e-9).all()

                peak = peak_extract(nav, 0.0)
                assert peak is not None
                stand = pixel_to_world(obs, peak[0])
                assert stand is not None
                for emb in embodiments:
                    assert is_traversable(scene, stand, emb)

            if fac.values.max() > 0.0:
                fac_pos += 1
                assert fac.values.max() == 1.0

        assert nav_pos >= 300 and fac_pos >= 300


# ---------------------------------------------------------------------------
# Criterion 4: sampled planner vs exhaustive control lattice
# ---------------------------------------------------------------------------

LATTICE_FIELDS = 5
LATTICE_RATIO = 0.9
LATTICE_TIME_LIMIT = 30.0


def test_criterion_04_mppi_vs_lattice():
    with criterion(4, "MPPI best score >= 0.9x exhaustive lattice; collision flags brute-checked"):
        t0 = time.monotonic()
        jetbot = EMBODIMENTS["jetbot"]
        options = np.linspace(-jetbot.omega_max, jetbot.omega_max, 5)
        for seed in range(LATTICE_FIELDS):
            rng = np.random.default_rng(seed)
            scene = plan_oracle.make_scene(5.0, 4.0)
            peak = (rng.uniform(2.5, 4.5), rng.uniform(0.8, 3.2))
            x0, y0 = 1.0, rng.uniform(1.0, 3.0)
            # Fields come from forward-facing camera projections, so the peak
            # starts inside the robot's frontal cone.
            bearing = math.atan2(peak[1] - y0, peak[0] - x0)
            start = Pose(x0, y0, bearing + rng.uniform(-1.2, 1.2))
            field = plan_oracle.ramp_field(scene.grid, peak)
            lattice_score, _ = plan_oracle.lattice_best(field, start, jetbot, 40, 0.1, options)
            best, _ = mppi_plan(field, start, jetbot, MppiParams(seed=seed))
            assert lattice_score > 0.0
            assert best.score >= LATTICE_RATIO * lattice_score - 1e-9
            assert best.collision_free
            for pose in best.poses:
                assert not plan_oracle.circle_hits_occupied(
                    scene.grid, pose.x, pose.y, jetbot.footprint_radius
                )
        assert time.monotonic() - t0 < LATTICE_TIME_LIMIT


# ---------------------------------------------------------------------------
# Criterion 5: oracle vs point baseline success-rate gap per embodiment
# ---------------------------------------------------------------------------

SR_GAP = 0.2
SR_EPISODES = 50
SR_TIME_LIMIT = 600.0
_SR_CAMERA = CameraIntrinsics(80, 60, 40.0, 40.0, 39.5, 29.5, 10.0)
_SR_BUILD = BuildParams(
    scenes=10,
    samples_per_scene=1,
    split=1.0,
    seed=21,
    p_neg=0.0,
    scene_params=SceneGenParams(room_extent=(5.5, 7.5), object_count=(1, 3), min_clearance=1.2),
    intrinsics=_SR_CAMERA,
)


def test_criterion_05_success_rate_gap(tmp_path):
    with criterion(5, "oracle SR beats point baseline by >= 0.2 on every embodiment"):
        t0 = time.monotonic()
        data = tmp_path / "episodes-data"
        build_dataset(data, _SR_BUILD)
        for emb in ("jetbot", "h1", "aliengo"):
            stats = {}
            for predictor in ("oracle", "point"):
                results = episodes_run(
                    data,
                    predictor,
                    embodiment=emb,
                    split="train_seen",
                    episodes_per_scene=5,
                    seed=4,
                    max_steps=300,
                )
                stats[predictor] = episode_metrics(results)[(emb, "seen")]
            oracle, point = stats["oracle"], stats["point"]
            assert oracle.episodes == SR_EPISODES and point.episodes == SR_EPISODES
            _note(
                f"[criterion 05] {emb}: oracle sr={oracle.sr:.2f} ne={oracle.ne:.2f} "
                f"ne_all={oracle.ne_all:.2f} | point sr={point.sr:.2f} ne={point.ne:.2f} "
                f"ne_all={point.ne_all:.2f} (valid {point.valid}/{point.episodes})"
            )
            assert oracle.sr - point.sr >= SR_GAP
            # Survivorship bias: conditioning NE on valid predictions hides the
            # baseline's failures, so the conditioned gap understates the
            # all-episode gap.
            assert point.ne - oracle.ne < point.ne_all - oracle.ne_all
        assert time.monotonic() - t0 < SR_TIME_LIMIT


# ---------------------------------------------------------------------------
# Criterion 6: graceful degradation under peak-shift noise
# ---------------------------------------------------------------------------

NOISE_SIGMAS = (0.0, 2.0, 4.0, 8.0)
NOISE_TOL = 0.02


def test_criterion_06_noise_degradation(ceiling):
    with criterion(6, "AR and nav F1 non-increasing as peak shift grows"):
        from heatnav.evaluation import Thresholds as Thr
        from heatnav.pipeline import bench_run, make_predictor, load_manifest, _manifest_gt_params
        from heatnav.predictors import NoiseParams

        manifest = load_manifest(ceiling.data)
        nav_params, fac_params = _manifest_gt_params(manifest)
        ars, f1s = [], []
        for sigma in NOISE_SIGMAS:
            predictor = make_predictor(
                "noisy",
                noise=NoiseParams(peak_shift_sigma=sigma, seed=123),
                nav_params=nav_params,
                fac_params=fac_params,
            )
            report, _ = bench_run(ceiling.data, predictor, split="test_unseen", thresholds=Thr())
            ars.append(report.ar)
            f1s.append(report.nav_f1)
        _note(f"[criterion 06] sigma sweep {NOISE_SIGMAS}: ar={ars} nav_f1={f1s}")
        for prev, nxt in zip(ars, ars[1:]):
            assert nxt <= prev + NOISE_TOL
        for prev, nxt in zip(f1s, f1s[1:]):
            assert nxt <= prev + NOISE_TOL


# ---------------------------------------------------------------------------
# Criterion 7: annealed facing weight never hurts the nav head
# ---------------------------------------------------------------------------

ANNEAL_PAIRS = 5
ANNEAL_STEPS = 60


def test_criterion_07_annealing(tmp_path):
    with criterion(7, "annealed final nav loss <= fixed-weight final nav loss on 5 paired seeds"):
        for pair in range(ANNEAL_PAIRS):
            data = tmp_path / f"pair-{pair}"
            build_dataset(
                data,
                BuildParams(scenes=2, samples_per_scene=3, split=1.0, seed=40 + pair),
            )
            samples = train_samples(data, "train_seen")
            annealed_schedule = AnnealSchedule(ANNEAL_STEPS)
            fixed_schedule = AnnealSchedule(
                ANNEAL_STEPS, fac_start_weight=1.0, fac_end_weight=1.0
            )
            _, annealed = toy_fit(samples, annealed_schedule)
            _, fixed = toy_fit(samples, fixed_schedule)
            assert annealed[-1].loss_nav <= fixed[-1].loss_nav + 1e-12


# ---------------------------------------------------------------------------
# Criterion 8: determinism and binary format round-trips
# ---------------------------------------------------------------------------


def test_criterion_08_determinism_and_formats(tmp_path):
    with criterion(8, "identical seeds rebuild byte-identical datasets; formats round-trip"):
        args = ["--scenes", "4", "--samples-per-scene", "3", "--seed", "77"]
        first = tmp_path / "first"
        second = tmp_path / "second"
        assert main(["gen-data", "--out", str(first)] + args) == 0
        assert main(["gen-data", "--out", str(second)] + args) == 0
        assert pipe_helpers.tree_hash(first) == pipe_helpers.tree_hash(second)

        sample = next((first / "samples").iterdir())
        rt = tmp_path / "roundtrip"
        rt.mkdir()
        save_depth(rt / "d.dpt", load_depth(sample / "depth.dpt"))
        assert (rt / "d.dpt").read_bytes() == (sample / "depth.dpt").read_bytes()
        save_instances(rt / "i.seg", load_instances(sample / "instances.seg"))
        assert (rt / "i.seg").read_bytes() == (sample / "instances.seg").read_bytes()
        for name in ("nav.hmf", "fac.hmf"):
            save_heatmap(rt / name, load_heatmap(sample / name))
            assert (rt / name).read_bytes() == (sample / name).read_bytes()
        scene_file = next((first / "scenes").iterdir())
        save_scene(load_scene(scene_file), rt / "s.scene.json")
        assert (rt / "s.scene.json").read_bytes() == scene_file.read_bytes()


# ---------------------------------------------------------------------------
# Criterion 9: hand-tallied metric fixture reproduced exactly
# ---------------------------------------------------------------------------

FIXTURE = Path(__file__).resolve().parent / "fixtures" / "metric_fixture.json"


def _point(value):
    return None if value is None else tuple(value)


def test_criterion_09_metric_fixture():
    with criterion(9, "hand-tallied 50-sample fixture reproduced exactly"):
        doc = json.loads(FIXTURE.read_text(encoding="ascii"))
        thresholds = Thresholds(**doc["thresholds"])
        judgments = [
            SampleJudgment(
                nav_outcome=row["nav"],
                fac_outcome=row["fac"],
                predicted_point=_point(row["predicted"]),
                gt_standpoint=_point(row["gt"]),
                world_error=row["world_error"],
                reachable=row["reachable"],
            )
            for row in doc["judgments"]
        ]
        assert len(judgments) == 50
        report = aggregate(judgments, thresholds)
        expect = doc["expected"]
        assert report.counts == expect["counts"]
        metrics = expect["metrics"]

        def exact(name):
            return metrics[name]["num"] / metrics[name]["den"]

        assert report.nav_precision == exact("nav_p")
        assert report.nav_recall == exact("nav_r")
        assert report.nav_f1 == exact("nav_f1")
        assert report.ar == exact("ar")
        assert report.mse == exact("mse")
        assert report.fac_precision == exact("fac_p")
        assert report.fac_recall == exact("fac_r")
        assert report.fac_f1 == exact("fac_f1")
        assert report.overall_precision == exact("overall_p")
        assert report.overall_recall == exact("overall_r")
        assert report.overall_f1 == exact("overall_f1")
        assert report.degenerate == ()

        episodes = [EpisodeResult(**row) for row in doc["episodes"]]
        assert len(episodes) == 40
        stats = episode_metrics(episodes)[("jetbot", "seen")]
        want = expect["episode_stats"]
        assert stats.episodes == want["episodes"]
        assert stats.valid == want["valid"]
        assert stats.successes == want["successes"]
        assert stats.sr == want["sr"]["num"] / want["sr"]["den"]
        assert stats.ne == want["ne"]["num"] / want["ne"]["den"]
        assert stats.ne_all == want["ne_all"]["num"] / want["ne_all"]["den"]


# ---------------------------------------------------------------------------
# Criterion 10: reference adapter conformance and loopback equivalence
# ---------------------------------------------------------------------------


def test_criterion_10_reference_adapter(ceiling, tmp_path):
    with criterion(10, "reference adapter passes serve-check and echoes the oracle ceiling"):
        assert REFERENCE_ADAPTER.exists(), f"reference adapter not built: {REFERENCE_ADAPTER}"
        cmd = f"node {REFERENCE_ADAPTER} echo_gt"
        assert main(["serve-check", "--adapter-cmd", cmd, "--timeout", "60"]) == 0

        ext_out = tmp_path / "external-out"
        rc = main(
            [
                "bench",
                "--data",
                str(ceiling.data),
                "--out",
                str(ext_out),
                "--predictor",
                "external",
                "--adapter-cmd",
                cmd,
                "--format",
                "json",
                "--timeout",
                "60",
            ]
        )
        assert rc == 0
        assert load_report(ext_out) == load_report(ceiling.oracle_out)
