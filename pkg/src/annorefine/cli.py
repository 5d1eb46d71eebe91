"""Command-line frontend for the annotation refinement pipeline.

Subcommands cover the full loop: synthesize a scenario bundle, build
motion-compensated superframes, estimate per-track speeds, refine the
boxes, evaluate against ground truth, and plot the series. Exit codes:
0 on success, 2 for usage or configuration problems, 3 for data
problems.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import re
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import io
from .errors import AlignmentError, ConfigError, DataError
from .estimators import (
    EstimatorConfig,
    StateEstimate,
    kf_filter,
    mhe_receding,
    mhe_solve,
    naive_speed,
    rts_smooth,
)
from .refine import refine_track
from .synth import (
    MetricsReport,
    corrupt_annotations,
    default_config,
    evaluate,
    generate_scenario,
)
from .tracks import KinematicState, boxes_to_world, project_to_path

_log = logging.getLogger(__name__)

_METHODS = ("mhe", "kf", "rts", "naive")
_TIME_TOL = 1e-6


def _load_json(path: Path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: bad JSON: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _safe_name(track_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", track_id)


def _frame_stars(bundle: io.ScenarioBundle) -> np.ndarray:
    n = len(bundle.scans)
    dt = bundle.delta_t
    return np.array([k * dt + dt / 2.0 for k in range(n)])


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------

def _save_svg(fig, path: Path) -> None:
    import matplotlib

    # fixed hash salt and no date stamp keep reruns byte-identical
    with matplotlib.rc_context({"svg.hashsalt": "annorefine"}):
        fig.savefig(path, format="svg", metadata={"Date": None})


def _plot_speeds(path: Path, track_id: str, times: np.ndarray,
                 by_method: dict[str, np.ndarray],
                 s_true: np.ndarray | None) -> None:
    from matplotlib.figure import Figure

    fig = Figure(figsize=(8.0, 4.5))
    ax = fig.add_subplot(111)
    if s_true is not None:
        ax.plot(times, s_true, color="0.25", linewidth=2.0, label="true")
    for method in by_method:
        ax.plot(times, by_method[method], linewidth=1.2, label=method)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("speed [m/s]")
    ax.set_title(f"track {track_id}")
    ax.grid(alpha=0.3)
    ax.legend(loc="best")
    _save_svg(fig, path)


def _plot_view_counts(path: Path, track_id: str, frames: np.ndarray,
                      pseudo_counts: np.ndarray,
                      true_counts: np.ndarray | None) -> None:
    from matplotlib.figure import Figure

    fig = Figure(figsize=(8.0, 3.0))
    ax = fig.add_subplot(111)
    ax.step(frames, pseudo_counts, where="mid", label="pseudo boxes")
    if true_counts is not None:
        ax.step(frames, true_counts, where="mid", linestyle="--",
                label="true views")
    ax.set_xlabel("frame")
    ax.set_ylabel("count")
    ax.set_title(f"track {track_id}: boxes per frame")
    ax.set_ylim(bottom=0)
    ax.grid(alpha=0.3)
    ax.legend(loc="best")
    _save_svg(fig, path)


# ---------------------------------------------------------------------------
# shared pipeline pieces
# ---------------------------------------------------------------------------

def _run_method(method: str, series, config: EstimatorConfig):
    """One estimator pass; (d, s) arrays aligned with the series."""
    if method == "naive":
        return series.d.copy(), naive_speed(series)
    if method == "mhe":
        if config.horizon == "full":
            est = mhe_solve(series, config)
        else:
            est = mhe_receding(series, config)
    elif method == "kf":
        est = kf_filter(series, config)
    elif method == "rts":
        est = rts_smooth(series, config)
    else:
        raise ConfigError(f"unknown estimation method {method!r}")
    d = np.array([st.d for st in est.states])
    s = np.array([st.s for st in est.states])
    return d, s


def _estimate_for_track(estimates: dict, track_id: str, method: str,
                        expected_times: np.ndarray) -> StateEstimate:
    """Rebuild a state estimate from CSV rows, checked against the track."""
    key = (track_id, method)
    if key not in estimates:
        raise ConfigError(
            f"estimates hold no {method!r} rows for track {track_id!r}")
    times, d, s = estimates[key]
    if len(times) != len(expected_times) or \
            np.max(np.abs(times - expected_times)) > _TIME_TOL:
        raise ConfigError(
            f"estimates for track {track_id!r} do not align with its "
            f"annotated frames")
    states = tuple(KinematicState(float(di), float(si))
                   for di, si in zip(d, s))
    return StateEstimate(states=states, objective=0.0, converged=True)


def _true_speeds(bundle: io.ScenarioBundle, track_id: str):
    gt = bundle.ground_truth
    if gt is None or track_id not in gt.agent_states:
        return None
    return np.array([st.speed for st in gt.agent_states[track_id]])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.config is not None:
        cfg = io.scenario_config_from_dict(_load_json(args.config))
    else:
        cfg = default_config()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, rng_seed=args.seed)
    gt, scans, _ = generate_scenario(cfg)
    tracks = corrupt_annotations(gt, cfg)
    out = _out_dir(args)
    io.write_scenario_bundle(out, cfg, gt, scans, tracks,
                             timestamp=not args.no_timestamp)
    n_points = sum(len(scan) for frame in scans for scan in frame.values())
    print(f"wrote bundle to {out}: {len(gt.frame_times)} frames, "
          f"{len(cfg.sensors)} sensors, {len(tracks)} tracks, "
          f"{n_points} points")
    return 0


def cmd_compensate(args) -> int:
    bundle = io.read_scenario_bundle(args.bundle)
    superframes = bundle.superframes()
    out = _out_dir(args)
    path = out / "superframes.csv"
    io.write_superframes(path, superframes)
    n_points = sum(len(f.timestamps) for f in superframes)
    print(f"wrote {path}: {len(superframes)} superframes, {n_points} points")
    return 0


def cmd_estimate(args) -> int:
    bundle = io.read_scenario_bundle(args.bundle, lenient_tracks=True)
    config = EstimatorConfig()
    if args.config is not None:
        config = io.estimator_config_from_dict(_load_json(args.config))
    methods = args.method or ["mhe", "kf", "naive"]
    out = _out_dir(args)
    rows = []
    plotted = 0
    for track in bundle.tracks:
        series = project_to_path(boxes_to_world(track, bundle.trajectory))
        by_method = {}
        for method in methods:
            d, s = _run_method(method, series, config)
            by_method[method] = s
            rows.extend(
                (t, di, si, method, track.track_id)
                for t, di, si in zip(series.times, d, s))
        if not args.no_plot:
            _plot_speeds(
                out / f"speed_{_safe_name(track.track_id)}.svg",
                track.track_id, series.times, by_method,
                _true_speeds(bundle, track.track_id))
            plotted += 1
    path = out / "estimates.csv"
    io.write_estimates(path, rows)
    print(f"wrote {path}: {len(rows)} rows "
          f"({len(bundle.tracks)} tracks x {len(methods)} methods), "
          f"{plotted} speed plots")
    return 0


def cmd_refine(args) -> int:
    bundle = io.read_scenario_bundle(args.bundle)
    estimates = io.read_estimates(args.estimates or
                                  Path(args.out) / "estimates.csv")
    params = None
    if args.config is not None:
        params = io.refine_params_from_dict(_load_json(args.config))
    superframes = bundle.superframes()
    stars = _frame_stars(bundle)
    refined = {}
    summaries = []
    for track in bundle.tracks:
        times = track.times
        estimate = _estimate_for_track(
            estimates, track.track_id, args.method, times)
        first = int(np.argmin(np.abs(stars - times[0])))
        track_frames = superframes[first:first + len(track)]
        if len(track_frames) != len(track) or \
                abs(stars[first] - times[0]) > _TIME_TOL:
            raise ConfigError(
                f"track {track.track_id!r} frames fall outside the bundle")
        try:
            pseudo = refine_track(track, track_frames, estimate, params)
        except AlignmentError as exc:
            # misaligned inputs here are a wiring mistake, not bad data
            raise ConfigError(str(exc)) from exc
        refined[track.track_id] = pseudo
        histogram = Counter(
            Counter(round(pb.box.t_star, 6) for pb in pseudo).values())
        summaries.append(
            f"track {track.track_id}: G histogram "
            f"{dict(sorted(histogram.items()))}")
    out = _out_dir(args)
    path = out / "refined.jsonl"
    io.write_refined(path, refined, stars)
    total = sum(len(v) for v in refined.values())
    print(f"wrote {path}: {total} pseudo boxes")
    for line in summaries:
        print(line)
    return 0


def cmd_eval(args) -> int:
    bundle = io.read_scenario_bundle(args.bundle, require_gt=True)
    gt = bundle.ground_truth
    estimates = io.read_estimates(args.estimates or
                                  Path(args.out) / "estimates.csv")
    refined = io.read_refined(args.refined or
                              Path(args.out) / "refined.jsonl")
    superframes = None
    annotations = {t.track_id: t for t in bundle.tracks}
    reports = []
    for track_id, method in sorted(estimates):
        if track_id not in gt.agent_states:
            raise DataError(f"ground truth holds no track {track_id!r}")
        states = gt.agent_states[track_id]
        expected = np.array([st.t_star for st in states])
        estimate = _estimate_for_track(estimates, track_id, method, expected)
        if track_id not in refined:
            raise DataError(f"refined output holds no track {track_id!r}")
        kwargs = {}
        if method == args.method:
            # coverage and containment only for the method that refined
            if superframes is None:
                superframes = bundle.superframes()
            kwargs = dict(superframes=superframes,
                          annotations=annotations.get(track_id))
        report = evaluate(estimate, refined[track_id], gt,
                          track_id=track_id, **kwargs)
        reports.append(MetricsReport(
            track_id=track_id,
            scalars={f"{method}/{k}": v for k, v in report.scalars.items()},
            series={f"{method}/{k}": v for k, v in report.series.items()},
        ))
        print(f"{track_id} {method}: "
              f"speed_rmse={report.scalars['speed_rmse']:.6g} "
              f"position_rmse={report.scalars['position_rmse']:.6g} "
              f"speed_tv={report.scalars['speed_tv']:.6g}")
    out = _out_dir(args)
    path = out / "metrics.csv"
    io.write_metrics(path, reports)
    print(f"wrote {path}: {len(reports)} reports")
    return 0


def cmd_plot(args) -> int:
    bundle = io.read_scenario_bundle(args.bundle)
    estimates = io.read_estimates(args.estimates or
                                  Path(args.out) / "estimates.csv")
    refined_path = args.refined or Path(args.out) / "refined.jsonl"
    refined = io.read_refined(refined_path) if Path(refined_path).exists() \
        else {}
    out = _out_dir(args)
    written = []
    track_ids = sorted({track_id for track_id, _ in estimates})
    for track_id in track_ids:
        methods = {m: estimates[(t, m)] for t, m in sorted(estimates)
                   if t == track_id}
        times = next(iter(methods.values()))[0]
        by_method = {m: s for m, (_, _, s) in methods.items()}
        path = out / f"speed_{_safe_name(track_id)}.svg"
        _plot_speeds(path, track_id, times, by_method,
                     _true_speeds(bundle, track_id))
        written.append(path)
        if track_id in refined:
            stars = _frame_stars(bundle)
            counts = Counter(
                int(np.argmin(np.abs(stars - pb.box.t_star)))
                for pb in refined[track_id])
            frames = np.arange(len(stars))
            pseudo_counts = np.array([counts.get(k, 0) for k in frames])
            true_counts = None
            if bundle.ground_truth is not None:
                vc = bundle.ground_truth.view_counts
                true_counts = np.array(
                    [vc.get((k, track_id), 0) for k in frames])
            path = out / f"views_{_safe_name(track_id)}.svg"
            _plot_view_counts(path, track_id, frames, pseudo_counts,
                              true_counts)
            written.append(path)
    print(f"wrote {len(written)} plots to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config for the subcommand")
    common.add_argument("--out", type=Path, default=Path("."),
                        help="output directory (default: current directory)")
    common.add_argument("--seed", type=int, default=None,
                        help="override the scenario RNG seed")
    common.add_argument("--no-timestamp", action="store_true",
                        help="omit created_at from manifests for "
                             "byte-identical reruns")

    parser = argparse.ArgumentParser(
        prog="annorefine",
        description="Refine multi-sensor 3D box annotations of fast-moving "
                    "objects: deskew scans, estimate speeds, split views, "
                    "and re-anchor boxes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic scenario bundle")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compensate", parents=[common],
                       help="write motion-compensated superframes")
    p.add_argument("bundle", type=Path, help="scenario bundle directory")
    p.set_defaults(func=cmd_compensate)

    p = sub.add_parser("estimate", parents=[common],
                       help="estimate per-track speeds")
    p.add_argument("bundle", type=Path, help="scenario bundle directory")
    p.add_argument("--method", action="append", choices=_METHODS,
                   help="estimator to run (repeatable; default: mhe kf naive)")
    p.add_argument("--no-plot", action="store_true",
                   help="skip the speed SVGs")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("refine", parents=[common],
                       help="regenerate per-view pseudo boxes")
    p.add_argument("bundle", type=Path, help="scenario bundle directory")
    p.add_argument("--estimates", type=Path, default=None,
                   help="estimates.csv path (default: OUT/estimates.csv)")
    p.add_argument("--method", default="mhe", choices=_METHODS,
                   help="estimate column to refine with")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common],
                       help="score estimates and pseudo boxes against "
                            "ground truth")
    p.add_argument("bundle", type=Path, help="scenario bundle directory")
    p.add_argument("--estimates", type=Path, default=None,
                   help="estimates.csv path (default: OUT/estimates.csv)")
    p.add_argument("--refined", type=Path, default=None,
                   help="refined.jsonl path (default: OUT/refined.jsonl)")
    p.add_argument("--method", default="mhe", choices=_METHODS,
                   help="method whose refinement is scored in depth")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", parents=[common],
                       help="re-render plots from existing outputs")
    p.add_argument("bundle", type=Path, help="scenario bundle directory")
    p.add_argument("--estimates", type=Path, default=None,
                   help="estimates.csv path (default: OUT/estimates.csv)")
    p.add_argument("--refined", type=Path, default=None,
                   help="refined.jsonl path (default: OUT/refined.jsonl)")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
