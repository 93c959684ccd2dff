"""Command line: dataset generation, benchmarks, episodes, image dumps.

Every flag can also be supplied through a TOML file (`--config`); explicit
flags override the file, which overrides built-in defaults.  The
`HEATNAV_LOG` environment variable (debug/info/warning/error) sets the
package log level.  Errors exit with status 2 and a single
`ErrorType: message` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from pathlib import Path
from types import SimpleNamespace
from typing import Dict, Optional

from .errors import HeatnavError, FormatError
from .evaluation import Thresholds, episode_metrics, episodes_csv, write_report
from .losses import AnnealSchedule
from .pipeline import (
    BuildParams,
    PREDICTOR_NAMES,
    RecordExternalPredictor,
    bench_run,
    build_dataset,
    load_manifest,
    load_noise_config,
    make_predictor,
    render_maps,
    serve_check,
    toy_load,
    toy_save,
    train_samples,
    _manifest_gt_params,
)
from .predictors import ExternalEndpoint, toy_fit
from .world import EMBODIMENTS

_LOG_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}

_REQUIRED = object()

DEFAULTS: Dict[str, dict] = {
    "gen-data": {
        "out": _REQUIRED,
        "scenes": 8,
        "samples_per_scene": 4,
        "split": 0.5,
        "seed": 0,
        "p_neg": 0.2,
    },
    "bench": {
        "data": _REQUIRED,
        "out": _REQUIRED,
        "split": "test_unseen",
        "predictor": "oracle",
        "noise_config": None,
        "adapter_cmd": None,
        "model": None,
        "embodiment": None,
        "confidence": 0.5,
        "dist_threshold": 1.0,
        "format": "csv",
        "timeout": 30.0,
        "fit_steps": 80,
    },
    "episodes": {
        "data": _REQUIRED,
        "out": _REQUIRED,
        "split": "test_unseen",
        "predictor": "oracle",
        "noise_config": None,
        "adapter_cmd": None,
        "model": None,
        "embodiment": "jetbot",
        "episodes_per_scene": 2,
        "seed": 0,
        "max_steps": 200,
        "success_threshold": 1.0,
        "confidence": 0.5,
        "timeout": 30.0,
        "fit_steps": 80,
    },
    "render-maps": {"record": _REQUIRED, "out": _REQUIRED, "seed": 0},
    "fit-toy": {
        "data": _REQUIRED,
        "out": _REQUIRED,
        "split": "train_seen",
        "steps": 200,
        "lr": 0.5,
    },
    "serve-check": {"adapter_cmd": _REQUIRED, "timeout": 30.0},
}


def _log_level(name: str) -> int:
    return _LOG_LEVELS.get(str(name).lower(), logging.WARNING)


def _load_toml(path: str) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"config is not valid TOML: {exc}") from exc


def _effective(command: str, args: argparse.Namespace) -> SimpleNamespace:
    """Merge defaults < config file < explicit flags; check required keys."""
    provided = dict(vars(args))
    provided.pop("command", None)
    provided.pop("func", None)
    config_path = provided.pop("config", None)
    merged = dict(DEFAULTS[command])
    if config_path is not None:
        for key, value in _load_toml(config_path).items():
            name = key.replace("-", "_")
            if name not in merged:
                raise FormatError(f"unknown config key {key!r} for command {command}")
            merged[name] = value
    merged.update(provided)
    for name, value in merged.items():
        if value is _REQUIRED:
            raise FormatError(f"missing required option --{name.replace('_', '-')}")
    return SimpleNamespace(**merged)


def _add(parser: argparse.ArgumentParser, *names: str, **kwargs) -> None:
    kwargs.setdefault("default", argparse.SUPPRESS)
    parser.add_argument(*names, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heatnav", description="dual-heatmap navigation benchmark toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add(gen, "--config", help="TOML file mirroring the flags")
    _add(gen, "--out", help="dataset output directory")
    _add(gen, "--scenes", type=int, help="number of scenes")
    _add(gen, "--samples-per-scene", type=int)
    _add(gen, "--split", type=float, help="fraction of scenes tagged train_seen")
    _add(gen, "--seed", type=int)
    _add(gen, "--p-neg", type=float, help="probability of an absent-label instruction")
    gen.set_defaults(func=cmd_gen_data)

    bench = sub.add_parser("bench", help="judge a predictor on a dataset split")
    _add(bench, "--config")
    _add(bench, "--data", help="dataset directory (with manifest.json)")
    _add(bench, "--out", help="report output directory")
    _add(bench, "--split", choices=("train_seen", "test_unseen"))
    _add(bench, "--predictor", choices=PREDICTOR_NAMES)
    _add(bench, "--noise-config", help="TOML noise parameters for the noisy predictor")
    _add(bench, "--adapter-cmd", help="external adapter command line")
    _add(bench, "--model", help="toy model weights file (else fit on train_seen)")
    _add(bench, "--embodiment", choices=tuple(EMBODIMENTS))
    _add(bench, "--confidence", type=float)
    _add(bench, "--dist-threshold", type=float)
    _add(bench, "--format", choices=("csv", "json"), help="summary printed to stdout")
    _add(bench, "--timeout", type=float)
    _add(bench, "--fit-steps", type=int, help="toy fitting steps when no --model")
    bench.set_defaults(func=cmd_bench)

    epi = sub.add_parser("episodes", help="closed-loop episodes on a dataset split")
    _add(epi, "--config")
    _add(epi, "--data")
    _add(epi, "--out")
    _add(epi, "--split", choices=("train_seen", "test_unseen"))
    _add(epi, "--predictor", choices=PREDICTOR_NAMES)
    _add(epi, "--noise-config")
    _add(epi, "--adapter-cmd")
    _add(epi, "--model")
    _add(epi, "--embodiment", choices=tuple(EMBODIMENTS))
    _add(epi, "--episodes-per-scene", type=int)
    _add(epi, "--seed", type=int)
    _add(epi, "--max-steps", type=int)
    _add(epi, "--success-threshold", type=float)
    _add(epi, "--confidence", type=float)
    _add(epi, "--timeout", type=float)
    _add(epi, "--fit-steps", type=int)
    epi.set_defaults(func=cmd_episodes)

    rm = sub.add_parser("render-maps", help="dump PGM/PPM images for one sample")
    _add(rm, "--config")
    _add(rm, "--record", help="path to a sample record.json")
    _add(rm, "--out")
    _add(rm, "--seed", type=int)
    rm.set_defaults(func=cmd_render_maps)

    fit = sub.add_parser("fit-toy", help="fit the toy predictor, write weights and loss curve")
    _add(fit, "--config")
    _add(fit, "--data")
    _add(fit, "--out")
    _add(fit, "--split", choices=("train_seen", "test_unseen"))
    _add(fit, "--steps", type=int)
    _add(fit, "--lr", type=float)
    fit.set_defaults(func=cmd_fit_toy)

    sc = sub.add_parser("serve-check", help="verify an adapter against the wire protocol")
    _add(sc, "--config")
    _add(sc, "--adapter-cmd")
    _add(sc, "--timeout", type=float)
    sc.set_defaults(func=cmd_serve_check)
    return parser


def _toy_model(ns: SimpleNamespace):
    if ns.model:
        return toy_load(ns.model)
    samples = train_samples(ns.data, "train_seen")
    model, _ = toy_fit(samples, AnnealSchedule(total_steps=int(ns.fit_steps)))
    return model


def _predictor_for(ns: SimpleNamespace, nav_params, fac_params):
    noise = load_noise_config(ns.noise_config) if ns.noise_config else None
    model = _toy_model(ns) if ns.predictor == "toy" else None
    return make_predictor(
        ns.predictor,
        noise=noise,
        adapter_cmd=ns.adapter_cmd,
        model=model,
        nav_params=nav_params,
        fac_params=fac_params,
        timeout=float(ns.timeout),
    )


def cmd_gen_data(ns: SimpleNamespace) -> int:
    params = BuildParams(
        scenes=int(ns.scenes),
        samples_per_scene=int(ns.samples_per_scene),
        split=float(ns.split),
        seed=int(ns.seed),
        p_neg=float(ns.p_neg),
    )
    manifest = build_dataset(ns.out, params)
    counts = manifest["counts"]
    total = sum(counts.values())
    print(f"wrote {total} samples to {ns.out} " + json.dumps(counts, sort_keys=True))
    return 0


def cmd_bench(ns: SimpleNamespace) -> int:
    manifest = load_manifest(ns.data)
    nav_params, fac_params = _manifest_gt_params(manifest)
    thresholds = Thresholds(confidence=float(ns.confidence), distance=float(ns.dist_threshold))
    embodiment = None
    if ns.embodiment is not None:
        if ns.embodiment not in EMBODIMENTS:
            raise ValueError(f"unknown embodiment {ns.embodiment!r}")
        embodiment = EMBODIMENTS[ns.embodiment]
    if ns.predictor == "external":
        # Benchmarks send the stored sample files and name the ground-truth
        # maps in the metadata, so loopback adapters can reproduce the oracle.
        if not ns.adapter_cmd:
            raise ValueError("external predictor requires --adapter-cmd")
        endpoint = ExternalEndpoint(shlex.split(ns.adapter_cmd), timeout=float(ns.timeout))
        predictor = RecordExternalPredictor(ns.data, endpoint)
    else:
        predictor = _predictor_for(ns, nav_params, fac_params)
    try:
        report, _ = bench_run(ns.data, predictor, ns.split, thresholds, embodiment)
    finally:
        if hasattr(predictor, "endpoint"):
            predictor.endpoint.close()
    paths = write_report(report, [], ns.out)
    key = "metrics_json" if ns.format == "json" else "metrics_csv"
    sys.stdout.write(paths[key].read_text(encoding="ascii"))
    return 0


def cmd_episodes(ns: SimpleNamespace) -> int:
    from .pipeline import episodes_run

    noise = load_noise_config(ns.noise_config) if ns.noise_config else None
    model = None
    if ns.predictor == "toy":
        model = _toy_model(ns)
    results = episodes_run(
        ns.data,
        ns.predictor,
        embodiment=ns.embodiment,
        split=ns.split,
        episodes_per_scene=int(ns.episodes_per_scene),
        seed=int(ns.seed),
        noise=noise,
        adapter_cmd=ns.adapter_cmd,
        model=model,
        max_steps=int(ns.max_steps),
        success_distance=float(ns.success_threshold),
        confidence=float(ns.confidence),
    )
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "episodes.csv").write_text(episodes_csv(results), encoding="ascii")
    summary = {}
    for (emb, split), s in sorted(episode_metrics(results).items()):
        summary[f"{emb}/{split}"] = {
            "episodes": s.episodes,
            "valid": s.valid,
            "successes": s.successes,
            "sr": s.sr,
            # ne averages over valid episodes only; null when none were valid
            "ne": s.ne if s.valid else None,
            "ne_all": s.ne_all,
        }
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, separators=(",", ":")) + "\n", encoding="ascii"
    )
    for key, s in summary.items():
        ne = "na" if s["ne"] is None else f"{s['ne']:.3f}"
        print(f"{key} sr={s['sr']:.3f} ne={ne} ne_all={s['ne_all']:.3f} n={s['episodes']}")
    return 0


def cmd_render_maps(ns: SimpleNamespace) -> int:
    paths = render_maps(ns.record, ns.out, int(ns.seed))
    for name in sorted(paths):
        print(paths[name])
    return 0


def cmd_fit_toy(ns: SimpleNamespace) -> int:
    samples = train_samples(ns.data, ns.split)
    model, trace = toy_fit(samples, AnnealSchedule(total_steps=int(ns.steps)), float(ns.lr))
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    toy_save(out / "toy_model.json", model)
    lines = ["step,w_nav,w_fac,loss_nav,loss_fac,loss"]
    for row in trace:
        lines.append(
            f"{row.step},{row.w_nav:.9f},{row.w_fac:.9f},"
            f"{row.loss_nav:.9f},{row.loss_fac:.9f},{row.loss:.9f}"
        )
    (out / "loss_curve.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    print(f"fit {len(samples)} samples in {len(trace)} steps, final loss {trace[-1].loss:.6f}")
    return 0


def cmd_serve_check(ns: SimpleNamespace) -> int:
    name = serve_check(ns.adapter_cmd, timeout=float(ns.timeout))
    print(f"adapter ok: {name or 'unnamed'}")
    return 0


def main(argv: Optional[list] = None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("heatnav").setLevel(_log_level(os.environ.get("HEATNAV_LOG", "warning")))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        ns = _effective(args.command, args)
        return args.func(ns)
    except (HeatnavError, ValueError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
