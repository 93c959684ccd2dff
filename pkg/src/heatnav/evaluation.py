"""Detection and episode metrics with explicit survivorship accounting.

Per-sample judgments classify navigation and facing predictions into
TP/FP/FN/TN against rendered ground truth.  Aggregation produces the
precision/recall/F1 family plus reachability rate and mean world error.
Episode results carry a `prediction_valid` flag so that navigation error
can be reported both the conventional way (valid episodes only) and over
all episodes, making the gap between the two visible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import EmptyInput, ShapeMismatch
from .heatmap import FacGtParams, NavGtParams, gen_fac_gt, gen_nav_gt, peak_extract
from .predictors import Instruction, Prediction
from .sensor import Observation, pixel_to_world
from .world import Embodiment, Pose, is_traversable

TP = "TP"
FP = "FP"
FN = "FN"
TN = "TN"
NOT_APPLICABLE = "NA"

_NAV_OUTCOMES = (TP, FP, FN, TN)
_FAC_OUTCOMES = (TP, FP, FN, TN, NOT_APPLICABLE)

SPLITS = ("seen", "unseen")


@dataclass(frozen=True)
class Thresholds:
    """Decision thresholds for turning heatmaps into point judgments."""

    confidence: float = 0.5
    distance: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence threshold must lie in [0, 1]")
        if self.distance <= 0.0:
            raise ValueError("distance threshold must be positive")


@dataclass(frozen=True)
class SampleJudgment:
    """Classification of one prediction against one observation."""

    nav_outcome: str
    fac_outcome: str
    predicted_point: Optional[Tuple[float, float]] = None
    gt_standpoint: Optional[Tuple[float, float]] = None
    world_error: Optional[float] = None
    reachable: Optional[bool] = None

    def __post_init__(self):
        if self.nav_outcome not in _NAV_OUTCOMES:
            raise ValueError(f"bad nav outcome {self.nav_outcome!r}")
        if self.fac_outcome not in _FAC_OUTCOMES:
            raise ValueError(f"bad fac outcome {self.fac_outcome!r}")
        both = self.predicted_point is not None and self.gt_standpoint is not None
        if (self.world_error is not None) != both:
            raise ValueError("world_error must be present exactly when both points are")


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated detection metrics in report order."""

    nav_precision: float
    nav_recall: float
    nav_f1: float
    ar: float
    mse: float
    fac_precision: float
    fac_recall: float
    fac_f1: float
    overall_precision: float
    overall_recall: float
    overall_f1: float
    counts: Dict[str, Dict[str, int]]
    thresholds: Thresholds
    degenerate: Tuple[str, ...] = ()


@dataclass(frozen=True)
class EpisodeResult:
    """Outcome of one closed-loop navigation episode."""

    prediction_valid: bool
    success: bool
    final_distance: float
    steps: int
    collided: bool
    embodiment: str
    split: str = "seen"
    seed: int = 0
    final_pose: Optional[Pose] = None

    def __post_init__(self):
        if self.success and not self.prediction_valid:
            raise ValueError("success requires a valid prediction")
        if not math.isfinite(self.final_distance) or self.final_distance < 0.0:
            raise ValueError("final_distance must be finite and non-negative")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


@dataclass(frozen=True)
class EpisodeStats:
    """Success rate and navigation error for one episode group."""

    episodes: int
    valid: int
    successes: int
    sr: float
    ne: float
    ne_all: float


def judge_sample(
    obs: Observation,
    instruction: Instruction,
    prediction: Prediction,
    thresholds: Thresholds = Thresholds(),
    embodiment: Optional[Embodiment] = None,
    nav_params: NavGtParams = NavGtParams(),
    fac_params: FacGtParams = FacGtParams(),
) -> SampleJudgment:
    """Classify one prediction against ground truth rendered from `obs`.

    Navigation: a prediction exists when the heatmap peak clears the
    confidence threshold; it is a TP only if the sample is positive, the
    peak back-projects onto ground traversable for `embodiment`, and it
    lands within the distance threshold of the ground-truth standpoint.
    Facing: a TP requires the predicted peak pixel to lie inside the
    facing target's visible mask; samples without a facing target are
    marked NA.
    """
    scene = obs.scene
    shape = (obs.intrinsics.height, obs.intrinsics.width)
    if prediction.h_nav.values.shape != shape or prediction.h_fac.values.shape != shape:
        raise ShapeMismatch(f"prediction resolution does not match observation {shape}")

    nav_obj = scene.object_by_id(instruction.nav_target) if instruction.nav_target is not None else None
    gt_nav = gen_nav_gt(obs, nav_obj, nav_params)
    positive = not gt_nav.is_negative()

    gt_standpoint: Optional[Tuple[float, float]] = None
    if positive:
        gt_peak = peak_extract(gt_nav, 0.0)
        assert gt_peak is not None
        hit = pixel_to_world(obs, gt_peak[0])
        assert hit is not None  # GT argmax is a floor pixel with finite depth
        gt_standpoint = (hit[0], hit[1])

    peak = peak_extract(prediction.h_nav, thresholds.confidence)
    predicted_point: Optional[Tuple[float, float]] = None
    if peak is not None:
        hit = pixel_to_world(obs, peak[0])
        if hit is not None:
            predicted_point = (hit[0], hit[1])

    reachable: Optional[bool] = None
    if positive and peak is not None:
        reachable = predicted_point is not None and is_traversable(scene, predicted_point, embodiment)

    world_error: Optional[float] = None
    if predicted_point is not None and gt_standpoint is not None:
        world_error = math.hypot(
            predicted_point[0] - gt_standpoint[0], predicted_point[1] - gt_standpoint[1]
        )

    if peak is None:
        nav_outcome = FN if positive else TN
    elif positive and reachable and world_error is not None and world_error <= thresholds.distance:
        nav_outcome = TP
    else:
        nav_outcome = FP

    if instruction.fac_target is None:
        fac_outcome = NOT_APPLICABLE
    else:
        fac_obj = scene.object_by_id(instruction.fac_target)
        fac_positive = not gen_fac_gt(obs, fac_obj, fac_params).is_negative()
        fac_peak = peak_extract(prediction.h_fac, thresholds.confidence)
        if fac_peak is None:
            fac_outcome = FN if fac_positive else TN
        else:
            (u, v), _ = fac_peak
            inside = int(obs.instance_ids[v, u]) == fac_obj.id
            fac_outcome = TP if inside else FP

    return SampleJudgment(
        nav_outcome=nav_outcome,
        fac_outcome=fac_outcome,
        predicted_point=predicted_point,
        gt_standpoint=gt_standpoint,
        world_error=world_error,
        reachable=reachable,
    )


def _prf(tp: int, fp: int, fn: int, prefix: str, flags: List[str]) -> Tuple[float, float, float]:
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        flags.append(f"{prefix}_precision")
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        flags.append(f"{prefix}_recall")
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def aggregate(judgments: Sequence[SampleJudgment], thresholds: Thresholds = Thresholds()) -> MetricsReport:
    """Fold per-sample judgments into a metrics report.

    Overall metrics pool navigation and facing TP/FP/FN counts
    (micro-average).  AR is the fraction of reachable predictions among
    positive samples that produced one; the mean world error is
    conditioned on reachability.  Metrics with an empty denominator are
    reported as 0 and named in `degenerate`.
    """
    judgments = list(judgments)
    if not judgments:
        raise EmptyInput("no judgments to aggregate")
    flags: List[str] = []

    nav = {k: 0 for k in _NAV_OUTCOMES}
    fac = {k: 0 for k in _FAC_OUTCOMES}
    for j in judgments:
        nav[j.nav_outcome] += 1
        fac[j.fac_outcome] += 1

    nav_p, nav_r, nav_f1 = _prf(nav[TP], nav[FP], nav[FN], "nav", flags)
    fac_p, fac_r, fac_f1 = _prf(fac[TP], fac[FP], fac[FN], "fac", flags)
    overall_p, overall_r, overall_f1 = _prf(
        nav[TP] + fac[TP], nav[FP] + fac[FP], nav[FN] + fac[FN], "overall", flags
    )

    with_prediction = [j for j in judgments if j.reachable is not None]
    if with_prediction:
        ar = sum(1 for j in with_prediction if j.reachable) / len(with_prediction)
    else:
        ar = 0.0
        flags.append("ar")

    errors = [j.world_error for j in judgments if j.reachable and j.world_error is not None]
    if errors:
        mse = sum(errors) / len(errors)
    else:
        mse = 0.0
        flags.append("mse")

    counts = {
        "nav": {k.lower(): nav[k] for k in _NAV_OUTCOMES},
        "fac": {k.lower(): fac[k] for k in _FAC_OUTCOMES},
    }
    return MetricsReport(
        nav_precision=nav_p,
        nav_recall=nav_r,
        nav_f1=nav_f1,
        ar=ar,
        mse=mse,
        fac_precision=fac_p,
        fac_recall=fac_r,
        fac_f1=fac_f1,
        overall_precision=overall_p,
        overall_recall=overall_r,
        overall_f1=overall_f1,
        counts=counts,
        thresholds=thresholds,
        degenerate=tuple(flags),
    )


def episode_metrics(results: Sequence[EpisodeResult]) -> Dict[Tuple[str, str], EpisodeStats]:
    """Success rate and navigation error per (embodiment, split) group.

    `ne` averages final distance over prediction-valid episodes only, the
    conventional accounting that silently drops invalid-prediction
    failures; `ne_all` averages over every episode so the two can be
    compared.
    """
    results = list(results)
    if not results:
        raise EmptyInput("no episode results")
    grouped: Dict[Tuple[str, str], List[EpisodeResult]] = {}
    for r in results:
        grouped.setdefault((r.embodiment, r.split), []).append(r)
    stats: Dict[Tuple[str, str], EpisodeStats] = {}
    for key, group in grouped.items():
        valid = [r for r in group if r.prediction_valid]
        successes = sum(1 for r in group if r.success)
        ne = sum(r.final_distance for r in valid) / len(valid) if valid else 0.0
        ne_all = sum(r.final_distance for r in group) / len(group)
        stats[key] = EpisodeStats(
            episodes=len(group),
            valid=len(valid),
            successes=successes,
            sr=successes / len(group),
            ne=ne,
            ne_all=ne_all,
        )
    return stats


_CSV_COLUMNS = (
    "nav_p",
    "nav_r",
    "nav_f1",
    "ar",
    "mse",
    "fac_p",
    "fac_r",
    "fac_f1",
    "overall_p",
    "overall_r",
    "overall_f1",
)


def _report_row(report: MetricsReport) -> Tuple[float, ...]:
    return (
        report.nav_precision,
        report.nav_recall,
        report.nav_f1,
        report.ar,
        report.mse,
        report.fac_precision,
        report.fac_recall,
        report.fac_f1,
        report.overall_precision,
        report.overall_recall,
        report.overall_f1,
    )


def write_report(
    report: MetricsReport,
    episodes: Sequence[EpisodeResult],
    out_dir: Path | str,
) -> Dict[str, Path]:
    """Write `metrics.csv`, `metrics.json`, and (if any) `episodes.csv`.

    The CSV holds display-rounded values; the JSON carries full-precision
    metrics, counts, and thresholds and is what `load_report` reads back.
    Output bytes are deterministic for identical inputs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: Dict[str, Path] = {}

    csv_path = out / "metrics.csv"
    row = ",".join(f"{v:.6f}" for v in _report_row(report))
    csv_path.write_text(",".join(_CSV_COLUMNS) + "\n" + row + "\n", encoding="ascii")
    paths["metrics_csv"] = csv_path

    payload: Dict[str, object] = {
        "metrics": {name: value for name, value in zip(_CSV_COLUMNS, _report_row(report))},
        "counts": report.counts,
        "thresholds": {
            "confidence": report.thresholds.confidence,
            "distance": report.thresholds.distance,
        },
        "degenerate": list(report.degenerate),
    }
    episodes = list(episodes)
    if episodes:
        payload["episodes"] = {
            f"{emb}/{split}": {
                "episodes": s.episodes,
                "valid": s.valid,
                "successes": s.successes,
                "sr": s.sr,
                "ne": s.ne,
                "ne_all": s.ne_all,
            }
            for (emb, split), s in sorted(episode_metrics(episodes).items())
        }
    json_path = out / "metrics.json"
    json_path.write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n", encoding="ascii"
    )
    paths["metrics_json"] = json_path

    if episodes:
        episodes_path = out / "episodes.csv"
        episodes_path.write_text(episodes_csv(episodes), encoding="ascii")
        paths["episodes_csv"] = episodes_path
    return paths


def episodes_csv(episodes: Sequence[EpisodeResult]) -> str:
    """One CSV document with one row per episode, booleans lowercased."""
    lines = ["embodiment,split,seed,prediction_valid,success,final_distance,steps,collided"]
    for r in episodes:
        lines.append(
            f"{r.embodiment},{r.split},{r.seed},"
            f"{str(r.prediction_valid).lower()},{str(r.success).lower()},"
            f"{r.final_distance:.6f},{r.steps},{str(r.collided).lower()}"
        )
    return "\n".join(lines) + "\n"


def load_report(out_dir: Path | str) -> MetricsReport:
    """Rebuild a MetricsReport from a directory written by `write_report`."""
    data = json.loads((Path(out_dir) / "metrics.json").read_text(encoding="ascii"))
    m = data["metrics"]
    return MetricsReport(
        nav_precision=m["nav_p"],
        nav_recall=m["nav_r"],
        nav_f1=m["nav_f1"],
        ar=m["ar"],
        mse=m["mse"],
        fac_precision=m["fac_p"],
        fac_recall=m["fac_r"],
        fac_f1=m["fac_f1"],
        overall_precision=m["overall_p"],
        overall_recall=m["overall_r"],
        overall_f1=m["overall_f1"],
        counts=data["counts"],
        thresholds=Thresholds(**data["thresholds"]),
        degenerate=tuple(data["degenerate"]),
    )
