"""Bundle and result file formats.

A scenario bundle is a directory of plain-text files: poses.csv (ego
trajectory knots), calib.json (sensor extrinsics), points.csv (raw
per-sensor returns), tracks.jsonl (annotated boxes), gt.jsonl (ground
truth), manifest.json (the generating config). Pipeline results use
estimates.csv, refined.jsonl, and metrics.csv. Every float is written
with 9 significant digits so reruns diff cleanly.
"""

from __future__ import annotations

import csv
import datetime
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .estimators import EstimatorConfig
from .geometry import PoseTrajectory, RigidTransform, Superframe, build_superframe
from .refine import PseudoBox, RefineParams
from .synth import (
    AgentFrameState,
    AgentSpec,
    GroundTruth,
    MetricsReport,
    Profile,
    ScenarioConfig,
    SensorScan,
    SensorSpec,
    SensorViewBox,
)
from .tracks import VEHICLE_FRAME, AnnotatedBox, AnnotatedTrack

_log = logging.getLogger(__name__)

_TIME_TOL = 1e-6

POSES_FILE = "poses.csv"
CALIB_FILE = "calib.json"
POINTS_FILE = "points.csv"
TRACKS_FILE = "tracks.jsonl"
GT_FILE = "gt.jsonl"
MANIFEST_FILE = "manifest.json"


def _fmt(x) -> str:
    return "%.9g" % float(x)


def _round_float(x: float) -> float:
    return float(_fmt(x))


def _jsonify(obj):
    if isinstance(obj, bool):
        return obj
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        if not math.isfinite(value):
            raise DataError("cannot serialize a non-finite float")
        return _round_float(value)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonify(x) for x in obj.tolist()]
    if isinstance(obj, (list, tuple)):
        return [_jsonify(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, str) or obj is None:
        return obj
    raise DataError(f"cannot serialize {type(obj).__name__}")


def _dump_json(obj) -> str:
    return json.dumps(_jsonify(obj), sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def write_jsonl(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(_dump_json(rec))
            f.write("\n")


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: bad JSON: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# poses and calibration
# ---------------------------------------------------------------------------

def write_poses(path, trajectory: PoseTrajectory) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t", "tx", "ty", "tz", "qw", "qx", "qy", "qz"])
        for t, pose in trajectory.knots:
            q = pose.to_quaternion()
            writer.writerow([_fmt(t)] + [_fmt(v) for v in pose.translation]
                            + [_fmt(v) for v in q])


def read_poses(path) -> PoseTrajectory:
    knots = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["t", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]:
            raise DataError(f"{path}: unexpected poses header {header}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 8:
                raise DataError(f"{path}:{row_no}: expected 8 columns")
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise DataError(f"{path}:{row_no}: {exc}") from exc
            pose = RigidTransform.from_quaternion(values[4:8], values[1:4])
            knots.append((values[0], pose))
    if not knots:
        raise DataError(f"{path}: no pose rows")
    return PoseTrajectory(knots)


def write_calibrations(path, calibrations: Mapping[str, RigidTransform]) -> None:
    payload = {
        sensor_id: {
            "translation": list(tf.translation),
            "quaternion": list(tf.to_quaternion()),
        }
        for sensor_id, tf in calibrations.items()
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dump_json(payload))
        f.write("\n")


def read_calibrations(path) -> dict[str, RigidTransform]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: bad JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise DataError(f"{path}: expected an object of sensors")
    out = {}
    for sensor_id, entry in payload.items():
        try:
            out[sensor_id] = RigidTransform.from_quaternion(
                entry["quaternion"], entry["translation"])
        except (KeyError, TypeError) as exc:
            raise DataError(
                f"{path}: sensor {sensor_id!r} needs translation and "
                f"quaternion") from exc
    return out


# ---------------------------------------------------------------------------
# raw points
# ---------------------------------------------------------------------------

def write_points(path, scans: Sequence[Mapping[str, SensorScan]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["x", "y", "z", "timestamp", "sensor_id", "frame_id"])
        for frame_id, per_sensor in enumerate(scans):
            for sensor_id in sorted(per_sensor):
                scan = per_sensor[sensor_id]
                for i in range(len(scan)):
                    writer.writerow([
                        _fmt(scan.positions[i, 0]), _fmt(scan.positions[i, 1]),
                        _fmt(scan.positions[i, 2]), _fmt(scan.timestamps[i]),
                        sensor_id, str(frame_id),
                    ])


def read_points(path, n_frames: int | None = None) -> list[dict[str, SensorScan]]:
    """Scans grouped per frame and sensor; labels are not stored here and
    come back empty."""
    buckets: dict[tuple[int, str], list] = {}
    max_frame = -1
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["x", "y", "z", "timestamp", "sensor_id", "frame_id"]:
            raise DataError(f"{path}: unexpected points header {header}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise DataError(f"{path}:{row_no}: expected 6 columns")
            try:
                xyz = [float(v) for v in row[:3]]
                ts = float(row[3])
                frame_id = int(row[5])
            except ValueError as exc:
                raise DataError(f"{path}:{row_no}: {exc}") from exc
            buckets.setdefault((frame_id, row[4]), []).append((xyz, ts))
            max_frame = max(max_frame, frame_id)
    count = n_frames if n_frames is not None else max_frame + 1
    scans: list[dict[str, SensorScan]] = [{} for _ in range(count)]
    for (frame_id, sensor_id), rows in sorted(buckets.items()):
        if frame_id >= count:
            raise DataError(
                f"{path}: frame_id {frame_id} beyond expected {count} frames")
        positions = np.array([xyz for xyz, _ in rows])
        timestamps = np.array([ts for _, ts in rows])
        scans[frame_id][sensor_id] = SensorScan(
            sensor_id, positions, timestamps,
            np.array([""] * len(rows), dtype=object))
    return scans


def write_superframes(path, superframes: Sequence[Superframe]) -> None:
    """Motion-compensated clouds, one row per point, vehicle frame at each
    frame's reference time."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["x", "y", "z", "timestamp", "sensor_id", "frame_id"])
        for frame in superframes:
            for i in range(len(frame.timestamps)):
                writer.writerow([
                    _fmt(frame.positions[i, 0]), _fmt(frame.positions[i, 1]),
                    _fmt(frame.positions[i, 2]), _fmt(frame.timestamps[i]),
                    frame.sensor_ids[i], str(frame.frame_id),
                ])


# ---------------------------------------------------------------------------
# annotated tracks
# ---------------------------------------------------------------------------

def write_tracks(path, tracks: Sequence[AnnotatedTrack]) -> None:
    records = []
    for track in tracks:
        for frame, box in enumerate(track.boxes):
            rec = {
                "track_id": track.track_id,
                "frame": frame,
                "t_star": box.t_star,
                "center": list(box.center),
                "dims": list(box.dims),
                "heading": box.heading,
            }
            if box.frame != VEHICLE_FRAME:
                rec["coords"] = box.frame
            if box.category is not None:
                rec["category"] = box.category
            records.append(rec)
    write_jsonl(path, records)


def read_tracks(path, *, skip_degenerate: bool = False) -> list[AnnotatedTrack]:
    """Tracks grouped and ordered by id.

    With ``skip_degenerate`` a track too short or too irregular to use is
    dropped with a warning instead of failing the whole read.
    """
    grouped: dict[str, list[tuple[int, AnnotatedBox]]] = {}
    for rec in read_jsonl(path):
        try:
            box = AnnotatedBox(
                float(rec["t_star"]), rec["center"], rec["dims"],
                float(rec["heading"]), str(rec["track_id"]),
                frame=rec.get("coords", VEHICLE_FRAME),
                category=rec.get("category"),
            )
            grouped.setdefault(str(rec["track_id"]), []).append(
                (int(rec["frame"]), box))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad track record: {exc}") from exc
    tracks = []
    for track_id in sorted(grouped):
        entries = sorted(grouped[track_id], key=lambda e: e[0])
        boxes = tuple(box for _, box in entries)
        if len(boxes) < 2:
            if skip_degenerate:
                _log.warning(
                    "track %r has %d box(es); skipped", track_id, len(boxes))
                continue
            raise DataError(
                f"{path}: track {track_id!r} has fewer than 2 boxes")
        stars = np.array([b.t_star for b in boxes])
        frames = np.array([frame for frame, _ in entries], dtype=float)
        delta_t = float(np.median(np.diff(stars) / np.diff(frames)))
        try:
            tracks.append(AnnotatedTrack(track_id, boxes, delta_t))
        except DataError:
            if skip_degenerate:
                _log.warning("track %r has irregular frames; skipped", track_id)
                continue
            raise
    return tracks


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

def write_gt(path, gt: GroundTruth) -> None:
    records: list[dict] = [{
        "type": "meta",
        "delta_t": gt.delta_t,
        "n_frames": len(gt.frame_times),
    }]
    for track_id in sorted(gt.agent_states):
        records.append({
            "type": "agent_meta",
            "track_id": track_id,
            "dims": list(gt.dims[track_id]),
            "category": gt.categories.get(track_id),
        })
        for st in gt.agent_states[track_id]:
            records.append({
                "type": "agent_state",
                "track_id": track_id,
                "frame": st.frame,
                "t_star": st.t_star,
                "center_world": list(st.center_world),
                "center_vehicle": list(st.center_vehicle),
                "speed": st.speed,
                "heading_world": st.heading_world,
                "heading_vehicle": st.heading_vehicle,
                "d_true": st.d_true,
            })
    for view in gt.per_sensor_boxes:
        records.append({
            "type": "sensor_view",
            "track_id": view.track_id,
            "frame": view.frame,
            "sensor_id": view.sensor_id,
            "t_star": view.box.t_star,
            "center": list(view.box.center),
            "dims": list(view.box.dims),
            "heading": view.box.heading,
            "mean_tau": view.mean_tau,
            "n_points": view.n_points,
        })
    for (frame, track_id), count in sorted(gt.view_counts.items()):
        records.append({
            "type": "view_count",
            "frame": frame,
            "track_id": track_id,
            "count": count,
        })
    for frame, labels in enumerate(gt.point_labels):
        records.append({
            "type": "labels",
            "frame": frame,
            "labels": [str(v) for v in labels.tolist()],
        })
    write_jsonl(path, records)


def read_gt(path, ego_traj: PoseTrajectory) -> GroundTruth:
    records = read_jsonl(path)
    meta = None
    agent_states: dict[str, list[AgentFrameState]] = {}
    dims: dict[str, np.ndarray] = {}
    categories: dict[str, str] = {}
    views: list[SensorViewBox] = []
    view_counts: dict[tuple[int, str], int] = {}
    labels: dict[int, np.ndarray] = {}
    try:
        for rec in records:
            kind = rec.get("type")
            if kind == "meta":
                meta = rec
            elif kind == "agent_meta":
                track_id = str(rec["track_id"])
                dims[track_id] = np.asarray(rec["dims"], dtype=float)
                if rec.get("category") is not None:
                    categories[track_id] = str(rec["category"])
            elif kind == "agent_state":
                track_id = str(rec["track_id"])
                agent_states.setdefault(track_id, []).append(AgentFrameState(
                    frame=int(rec["frame"]), t_star=float(rec["t_star"]),
                    center_world=np.asarray(rec["center_world"], dtype=float),
                    center_vehicle=np.asarray(rec["center_vehicle"], dtype=float),
                    speed=float(rec["speed"]),
                    heading_world=float(rec["heading_world"]),
                    heading_vehicle=float(rec["heading_vehicle"]),
                    d_true=float(rec["d_true"]),
                ))
            elif kind == "sensor_view":
                track_id = str(rec["track_id"])
                box = AnnotatedBox(
                    float(rec["t_star"]), rec["center"], rec["dims"],
                    float(rec["heading"]), track_id)
                views.append(SensorViewBox(
                    frame=int(rec["frame"]), track_id=track_id,
                    sensor_id=str(rec["sensor_id"]), box=box,
                    mean_tau=float(rec["mean_tau"]),
                    n_points=int(rec["n_points"]),
                ))
            elif kind == "view_count":
                view_counts[(int(rec["frame"]), str(rec["track_id"]))] = \
                    int(rec["count"])
            elif kind == "labels":
                labels[int(rec["frame"])] = np.array(
                    [str(v) for v in rec["labels"]], dtype=object)
            else:
                raise DataError(f"unknown ground-truth record type {kind!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad ground-truth record: {exc}") from exc
    if meta is None:
        raise DataError(f"{path}: missing meta record")
    n_frames = int(meta["n_frames"])
    delta_t = float(meta["delta_t"])
    point_labels = tuple(
        labels.get(k, np.empty(0, dtype=object)) for k in range(n_frames))
    for track_id in agent_states:
        agent_states[track_id].sort(key=lambda st: st.frame)
    return GroundTruth(
        ego_traj=ego_traj,
        delta_t=delta_t,
        frame_times=tuple(k * delta_t for k in range(n_frames)),
        agent_states={tid: tuple(sts) for tid, sts in agent_states.items()},
        per_sensor_boxes=tuple(views),
        point_labels=point_labels,
        view_counts=view_counts,
        dims=dims,
        categories=categories,
    )


# ---------------------------------------------------------------------------
# estimates, refined boxes, metrics
# ---------------------------------------------------------------------------

def write_estimates(path, rows: Sequence[tuple]) -> None:
    """Rows are (t, d, s, method, track_id) tuples, written in order."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t", "d", "s", "method", "track_id"])
        for t, d, s, method, track_id in rows:
            writer.writerow([_fmt(t), _fmt(d), _fmt(s), method, track_id])


def read_estimates(path) -> dict[tuple[str, str], tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Mapping (track_id, method) -> (times, d, s), each sorted by time."""
    buckets: dict[tuple[str, str], list] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["t", "d", "s", "method", "track_id"]:
            raise DataError(f"{path}: unexpected estimates header {header}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise DataError(f"{path}:{row_no}: expected 5 columns")
            try:
                t, d, s = float(row[0]), float(row[1]), float(row[2])
            except ValueError as exc:
                raise DataError(f"{path}:{row_no}: {exc}") from exc
            buckets.setdefault((row[4], row[3]), []).append((t, d, s))
    out = {}
    for key, rows in buckets.items():
        rows.sort(key=lambda r: r[0])
        arr = np.array(rows)
        out[key] = (arr[:, 0], arr[:, 1], arr[:, 2])
    return out


def write_refined(path, refined: Mapping[str, Sequence[PseudoBox]],
                  frame_stars: Sequence[float]) -> None:
    """One record per pseudo box; frames are matched by reference time."""
    stars = np.asarray(frame_stars, dtype=float)
    records = []
    for track_id in sorted(refined):
        counters: dict[int, int] = {}
        for pb in refined[track_id]:
            k = int(np.argmin(np.abs(stars - pb.box.t_star)))
            if abs(stars[k] - pb.box.t_star) > _TIME_TOL:
                raise DataError(
                    f"pseudo box at t={pb.box.t_star} matches no frame")
            index = counters.get(k, 0)
            counters[k] = index + 1
            rec = {
                "track_id": track_id,
                "frame": k,
                "t_star": pb.box.t_star,
                "center": list(pb.box.center),
                "dims": list(pb.box.dims),
                "heading": pb.box.heading,
                "pseudo_index": index,
                "source_cluster": pb.source_cluster,
                "applied_shift": list(pb.applied_shift),
                "anchored": pb.anchored,
            }
            if pb.box.category is not None:
                rec["category"] = pb.box.category
            records.append(rec)
    write_jsonl(path, records)


def read_refined(path) -> dict[str, list[PseudoBox]]:
    grouped: dict[str, list[tuple[int, int, PseudoBox]]] = {}
    for rec in read_jsonl(path):
        try:
            box = AnnotatedBox(
                float(rec["t_star"]), rec["center"], rec["dims"],
                float(rec["heading"]), str(rec["track_id"]),
                category=rec.get("category"),
            )
            pb = PseudoBox(
                box=box,
                source_cluster=int(rec["source_cluster"]),
                applied_shift=np.asarray(rec["applied_shift"], dtype=float),
            )
            grouped.setdefault(str(rec["track_id"]), []).append(
                (int(rec["frame"]), int(rec["pseudo_index"]), pb))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad refined record: {exc}") from exc
    return {
        track_id: [pb for _, _, pb in sorted(entries, key=lambda e: e[:2])]
        for track_id, entries in sorted(grouped.items())
    }


def write_metrics(path, reports: Sequence[MetricsReport]) -> None:
    """Scalars get an empty t column; series emit one row per frame time."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["track_id", "metric", "t", "value"])
        for report in reports:
            for name in sorted(report.scalars):
                writer.writerow(
                    [report.track_id, name, "", _fmt(report.scalars[name])])
            for name in sorted(report.series):
                times, values = report.series[name]
                for t, v in zip(times, values):
                    writer.writerow([report.track_id, name, _fmt(t), _fmt(v)])


# ---------------------------------------------------------------------------
# config serialization
# ---------------------------------------------------------------------------

def _require_keys(data: dict, required: set[str], allowed: set[str],
                  context: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown key {unknown[0]!r}")
    missing = sorted(required - set(data))
    if missing:
        raise ConfigError(f"{context}: missing key {missing[0]!r}")


def _profile_to_dict(profile: Profile) -> dict:
    return {"times": list(profile.times), "values": list(profile.values)}


def _profile_from_dict(data, context: str) -> Profile:
    if isinstance(data, (int, float)):
        return Profile.constant(float(data))
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected a number or times/values object")
    _require_keys(data, {"times", "values"}, {"times", "values"}, context)
    try:
        return Profile(data["times"], data["values"])
    except DataError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _transform_to_dict(tf: RigidTransform) -> dict:
    return {
        "translation": list(tf.translation),
        "quaternion": list(tf.to_quaternion()),
    }


def _transform_from_dict(data, context: str) -> RigidTransform:
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected a translation/quaternion object")
    _require_keys(data, {"translation", "quaternion"},
                  {"translation", "quaternion"}, context)
    try:
        return RigidTransform.from_quaternion(
            data["quaternion"], data["translation"])
    except DataError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


_SENSOR_KEYS = {"sensor_id", "mount", "sweep_period", "azimuth_offset",
                "rays_per_sweep", "max_range"}
_AGENT_KEYS = {"track_id", "init_pos", "dims", "speed_profile",
               "heading_profile", "category"}
_SCENARIO_KEYS = {"sensors", "duration", "frame_rate", "ego_speed_profile",
                  "agents", "annotation_noise_sigma", "view_bias", "rng_seed",
                  "landmarks", "jitter_sigma", "incidence_min",
                  "ego_pose_rate", "view_gap_threshold", "min_view_points"}


def scenario_config_to_dict(cfg: ScenarioConfig) -> dict:
    return {
        "duration": cfg.duration,
        "frame_rate": cfg.frame_rate,
        "ego_speed_profile": _profile_to_dict(cfg.ego_speed_profile),
        "agents": [
            {
                "track_id": a.track_id,
                "init_pos": list(a.init_pos),
                "dims": list(a.dims),
                "speed_profile": _profile_to_dict(a.speed_profile),
                "heading_profile": _profile_to_dict(a.heading_profile),
                "category": a.category,
            }
            for a in cfg.agents
        ],
        "sensors": [
            {
                "sensor_id": s.sensor_id,
                "mount": _transform_to_dict(s.mount),
                "sweep_period": s.sweep_period,
                "azimuth_offset": s.azimuth_offset,
                "rays_per_sweep": s.rays_per_sweep,
                "max_range": s.max_range,
            }
            for s in cfg.sensors
        ],
        "annotation_noise_sigma": cfg.annotation_noise_sigma,
        "view_bias": cfg.view_bias,
        "rng_seed": cfg.rng_seed,
        "landmarks": [list(p) for p in cfg.landmarks],
        "jitter_sigma": cfg.jitter_sigma,
        "incidence_min": cfg.incidence_min,
        "ego_pose_rate": cfg.ego_pose_rate,
        "view_gap_threshold": cfg.view_gap_threshold,
        "min_view_points": cfg.min_view_points,
    }


def scenario_config_from_dict(data) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("scenario config must be a JSON object")
    _require_keys(data, {"sensors"}, _SCENARIO_KEYS, "scenario config")
    sensors = []
    if not isinstance(data["sensors"], list):
        raise ConfigError("sensors: expected a list")
    for i, entry in enumerate(data["sensors"]):
        context = f"sensors[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{context}: expected an object")
        _require_keys(entry, {"sensor_id", "mount", "sweep_period",
                              "azimuth_offset"}, _SENSOR_KEYS, context)
        sensors.append(SensorSpec(
            sensor_id=str(entry["sensor_id"]),
            mount=_transform_from_dict(entry["mount"], f"{context}.mount"),
            sweep_period=float(entry["sweep_period"]),
            azimuth_offset=float(entry["azimuth_offset"]),
            rays_per_sweep=int(entry.get("rays_per_sweep", 600)),
            max_range=float(entry.get("max_range", 250.0)),
        ))
    agents = []
    if not isinstance(data.get("agents", []), list):
        raise ConfigError("agents: expected a list")
    for i, entry in enumerate(data.get("agents", [])):
        context = f"agents[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{context}: expected an object")
        _require_keys(entry, {"track_id", "init_pos", "dims", "speed_profile",
                              "heading_profile"}, _AGENT_KEYS, context)
        agents.append(AgentSpec(
            track_id=str(entry["track_id"]),
            init_pos=entry["init_pos"],
            dims=entry["dims"],
            speed_profile=_profile_from_dict(
                entry["speed_profile"], f"{context}.speed_profile"),
            heading_profile=_profile_from_dict(
                entry["heading_profile"], f"{context}.heading_profile"),
            category=str(entry.get("category", "vehicle")),
        ))
    kwargs = dict(
        sensors=tuple(sensors),
        agents=tuple(agents),
        ego_speed_profile=_profile_from_dict(
            data.get("ego_speed_profile", 0.0), "ego_speed_profile"),
        landmarks=tuple(
            np.asarray(p, dtype=float) for p in data.get("landmarks", [])),
    )
    for key, cast in (("duration", float), ("frame_rate", float),
                      ("annotation_noise_sigma", float), ("view_bias", bool),
                      ("rng_seed", int), ("jitter_sigma", float),
                      ("incidence_min", float), ("ego_pose_rate", float),
                      ("view_gap_threshold", float), ("min_view_points", int)):
        if key in data:
            kwargs[key] = cast(data[key])
    try:
        return ScenarioConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario config: {exc}") from exc


_ESTIMATOR_KEYS = {"Q", "Omega", "Psi", "horizon", "u_nominal",
                   "speed_bounds", "solver_tol", "max_iter"}


def _weight_matrix(value, context: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape == ():
        return np.eye(2) * float(arr)
    if arr.shape == (2,):
        return np.diag(arr)
    if arr.shape == (2, 2):
        return arr
    raise ConfigError(f"{context}: expected a scalar, 2-vector, or 2x2 matrix")


def estimator_config_to_dict(config: EstimatorConfig) -> dict:
    out = {
        "Q": [list(row) for row in np.asarray(config.Q, dtype=float)],
        "Omega": float(config.Omega),
        "Psi": [list(row) for row in np.asarray(config.Psi, dtype=float)],
        "horizon": config.horizon,
        "u_nominal": config.u_nominal,
        "solver_tol": config.solver_tol,
        "max_iter": config.max_iter,
    }
    if config.speed_bounds is not None:
        out["speed_bounds"] = [
            None if not math.isfinite(b) else float(b)
            for b in config.speed_bounds
        ]
    return out


def estimator_config_from_dict(data) -> EstimatorConfig:
    if not isinstance(data, dict):
        raise ConfigError("estimator config must be a JSON object")
    _require_keys(data, set(), _ESTIMATOR_KEYS, "estimator config")
    kwargs = {}
    if "Q" in data:
        kwargs["Q"] = _weight_matrix(data["Q"], "Q")
    if "Psi" in data:
        kwargs["Psi"] = _weight_matrix(data["Psi"], "Psi")
    if "Omega" in data:
        kwargs["Omega"] = float(data["Omega"])
    if "horizon" in data:
        horizon = data["horizon"]
        if horizon != "full":
            try:
                horizon = int(horizon)
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    "horizon: expected 'full' or an integer") from exc
        kwargs["horizon"] = horizon
    if "u_nominal" in data:
        kwargs["u_nominal"] = float(data["u_nominal"])
    if "speed_bounds" in data and data["speed_bounds"] is not None:
        bounds = data["speed_bounds"]
        if not isinstance(bounds, (list, tuple)) or len(bounds) != 2:
            raise ConfigError("speed_bounds: expected [low, high]")
        low = -math.inf if bounds[0] is None else float(bounds[0])
        high = math.inf if bounds[1] is None else float(bounds[1])
        kwargs["speed_bounds"] = (low, high)
    if "solver_tol" in data:
        kwargs["solver_tol"] = float(data["solver_tol"])
    if "max_iter" in data:
        kwargs["max_iter"] = int(data["max_iter"])
    return EstimatorConfig(**kwargs)


_REFINE_KEYS = {"gap_threshold", "min_cluster_points", "roi_margin",
                "kde_bandwidth", "anchor_margin", "min_refine_speed"}


def refine_params_to_dict(params: RefineParams) -> dict:
    return {
        "gap_threshold": params.gap_threshold,
        "min_cluster_points": params.min_cluster_points,
        "roi_margin": params.roi_margin,
        "kde_bandwidth": params.kde_bandwidth,
        "anchor_margin": params.anchor_margin,
        "min_refine_speed": params.min_refine_speed,
    }


def refine_params_from_dict(data) -> RefineParams:
    if not isinstance(data, dict):
        raise ConfigError("refine params must be a JSON object")
    _require_keys(data, set(), _REFINE_KEYS, "refine params")
    kwargs = dict(data)
    if "min_cluster_points" in kwargs:
        kwargs["min_cluster_points"] = int(kwargs["min_cluster_points"])
    for key in ("gap_threshold", "roi_margin", "anchor_margin",
                "min_refine_speed"):
        if key in kwargs:
            kwargs[key] = float(kwargs[key])
    if "kde_bandwidth" in kwargs and kwargs["kde_bandwidth"] != "auto":
        kwargs["kde_bandwidth"] = float(kwargs["kde_bandwidth"])
    return RefineParams(**kwargs)


# ---------------------------------------------------------------------------
# scenario bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioBundle:
    """Everything a scenario directory holds, parsed and ready to use."""

    config: ScenarioConfig
    trajectory: PoseTrajectory
    calibrations: dict[str, RigidTransform]
    scans: list[dict[str, SensorScan]]
    tracks: list[AnnotatedTrack]
    ground_truth: GroundTruth | None
    manifest: dict

    @property
    def delta_t(self) -> float:
        return 1.0 / self.config.frame_rate

    def superframes(self) -> list[Superframe]:
        frames = []
        for frame_id, per_sensor in enumerate(self.scans):
            t0 = frame_id * self.delta_t
            frames.append(build_superframe(
                {sid: scan.to_points() for sid, scan in per_sensor.items()},
                self.trajectory, self.calibrations, t0, self.delta_t,
                frame_id=frame_id,
            ))
        return frames


def write_scenario_bundle(out_dir, cfg: ScenarioConfig, gt: GroundTruth,
                          scans: Sequence[Mapping[str, SensorScan]],
                          tracks: Sequence[AnnotatedTrack], *,
                          timestamp: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "scenario-bundle-v1",
        "n_frames": len(gt.frame_times),
        "config": scenario_config_to_dict(cfg),
    }
    if timestamp:
        manifest["created_at"] = datetime.datetime.now(
            datetime.timezone.utc).isoformat()
    write_poses(out / POSES_FILE, gt.ego_traj)
    write_calibrations(
        out / CALIB_FILE, {s.sensor_id: s.mount for s in cfg.sensors})
    write_points(out / POINTS_FILE, scans)
    write_tracks(out / TRACKS_FILE, tracks)
    write_gt(out / GT_FILE, gt)
    with open(out / MANIFEST_FILE, "w", encoding="utf-8") as f:
        f.write(_dump_json(manifest))
        f.write("\n")
    return out


def read_scenario_bundle(bundle_dir, *, require_gt: bool = False,
                         lenient_tracks: bool = False) -> ScenarioBundle:
    root = Path(bundle_dir)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    manifest_path = root / MANIFEST_FILE
    if not manifest_path.exists():
        raise DataError(f"{root}: missing {MANIFEST_FILE}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest_path}: bad JSON: {exc}") from exc
    if "config" not in manifest:
        raise DataError(f"{manifest_path}: missing config")
    cfg = scenario_config_from_dict(manifest["config"])
    n_frames = int(manifest.get("n_frames",
                                round(cfg.duration * cfg.frame_rate)))
    for name in (POSES_FILE, CALIB_FILE, POINTS_FILE, TRACKS_FILE):
        if not (root / name).exists():
            raise DataError(f"{root}: missing {name}")
    trajectory = read_poses(root / POSES_FILE)
    calibrations = read_calibrations(root / CALIB_FILE)
    scans = read_points(root / POINTS_FILE, n_frames)
    tracks = read_tracks(root / TRACKS_FILE, skip_degenerate=lenient_tracks)
    gt_path = root / GT_FILE
    ground_truth = None
    if gt_path.exists():
        ground_truth = read_gt(gt_path, trajectory)
    elif require_gt:
        raise ConfigError(f"{root}: evaluation needs {GT_FILE}")
    return ScenarioBundle(
        config=cfg, trajectory=trajectory, calibrations=calibrations,
        scans=scans, tracks=tracks, ground_truth=ground_truth,
        manifest=manifest,
    )
