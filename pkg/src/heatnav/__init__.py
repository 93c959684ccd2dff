"""Dual-heatmap semantic navigation toolkit.

Simulates 2.5D indoor scenes, generates ground-truth navigation and facing
heatmaps, trains small heatmap heads, plans with sampling-based control, and
benchmarks heatmap predictors end to end.
"""
from .errors import HeatnavError
from .evaluation import (
    EpisodeResult,
    MetricsReport,
    SampleJudgment,
    Thresholds,
    aggregate,
    episode_metrics,
    judge_sample,
    load_report,
    write_report,
)
from .pipeline import (
    DEFAULT_VOCAB,
    BuildParams,
    SceneGenParams,
    bench_run,
    build_dataset,
    episodes_run,
    gen_instruction,
    gen_scene,
    load_manifest,
    load_sample,
    make_predictor,
    render_maps,
    serve_check,
    validate_dataset,
    write_pgm,
    write_ppm,
)
from .planner import (
    ControlSequence,
    FieldParams,
    MppiParams,
    PotentialField,
    Trajectory,
    facing_alignment,
    j_value,
    mppi_plan,
    project_field,
    rollout,
    run_episode,
    standpoint_goal,
    waypoint_follow,
)
from .world import (
    EMBODIMENTS,
    Embodiment,
    ObjectInstance,
    OccupancyGrid,
    Pose,
    Scene,
    geodesic_field,
    inflate,
    is_traversable,
    load_scene,
    save_scene,
    wrap_angle,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_VOCAB",
    "BuildParams",
    "SceneGenParams",
    "bench_run",
    "build_dataset",
    "episodes_run",
    "gen_instruction",
    "gen_scene",
    "load_manifest",
    "load_sample",
    "make_predictor",
    "render_maps",
    "serve_check",
    "validate_dataset",
    "write_pgm",
    "write_ppm",
    "EMBODIMENTS",
    "ControlSequence",
    "Embodiment",
    "EpisodeResult",
    "FieldParams",
    "HeatnavError",
    "MetricsReport",
    "MppiParams",
    "PotentialField",
    "SampleJudgment",
    "Thresholds",
    "Trajectory",
    "aggregate",
    "episode_metrics",
    "facing_alignment",
    "j_value",
    "judge_sample",
    "load_report",
    "mppi_plan",
    "project_field",
    "rollout",
    "run_episode",
    "standpoint_goal",
    "waypoint_follow",
    "write_report",
    "ObjectInstance",
    "OccupancyGrid",
    "Pose",
    "Scene",
    "geodesic_field",
    "inflate",
    "is_traversable",
    "load_scene",
    "save_scene",
    "wrap_angle",
    "__version__",
]
