"""Synthetic multi-sensor scenes with closed-form kinematic ground truth.

A scene has a straight-driving ego vehicle carrying M spinning sensors,
plus fast box-shaped agents and optional static landmark points. Sensors
sample agent surfaces with per-point timestamps spread over each sweep,
which is what smears a moving object across a superframe. The generator
also corrupts the true annotations into human-like noisy tracks and
scores estimator and refinement output against the ground truth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, DataError
from .estimators import StateEstimate
from .geometry import (
    PoseTrajectory,
    RigidTransform,
    Superframe,
    TimedPoint,
    build_superframe,
    wrap_angle,
)
from .refine import PseudoBox, RefineParams, cluster_along_heading, collect_roi_points
from .tracks import WORLD_FRAME, AnnotatedBox, AnnotatedTrack

_log = logging.getLogger(__name__)

_TWO_PI = 2.0 * np.pi
_GRID_INSET = 0.05
_TIME_TOL = 1e-6

# box faces as (fixed local axis, sign); the bottom is never sampled
_FACES = ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0))


@dataclass(frozen=True)
class Profile:
    """Piecewise-linear function of time with an exact antiderivative.

    Outside the knot range the edge value extends as a constant.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if t.ndim != 1 or t.shape != v.shape or t.size == 0:
            raise DataError("profile needs aligned 1-D times and values")
        if np.any(np.diff(t) <= 0.0):
            raise DataError("profile times must be strictly increasing")
        cum = np.concatenate(
            [[0.0], np.cumsum(np.diff(t) * (v[:-1] + v[1:]) / 2.0)])
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def constant(cls, value: float, t0: float = 0.0) -> "Profile":
        return cls(np.array([t0]), np.array([float(value)]))

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    def value(self, t):
        out = np.interp(np.asarray(t, dtype=float), self.times, self.values)
        return float(out) if np.ndim(t) == 0 else out

    def antiderivative(self, t):
        """Exact integral from the first knot to t (edges extrapolate flat)."""
        tq = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.clip(np.searchsorted(self.times, tq, side="right") - 1,
                      0, self.times.size - 1)
        v_t = np.interp(tq, self.times, self.values)
        out = self._cum[idx] \
            + (self.values[idx] + v_t) / 2.0 * (tq - self.times[idx])
        return float(out[0]) if np.ndim(t) == 0 else out


@dataclass(frozen=True)
class AgentSpec:
    """A rigid box agent following a speed and heading profile."""

    track_id: str
    init_pos: np.ndarray
    dims: np.ndarray
    speed_profile: Profile
    heading_profile: Profile
    category: str = "vehicle"

    def __post_init__(self) -> None:
        pos = np.asarray(self.init_pos, dtype=float).reshape(3)
        dims = np.asarray(self.dims, dtype=float).reshape(3)
        object.__setattr__(self, "init_pos", pos)
        object.__setattr__(self, "dims", dims)


@dataclass(frozen=True)
class SensorSpec:
    """One spinning range sensor rigidly mounted on the ego vehicle.

    azimuth_offset is the sensor-frame bearing at which each sweep starts;
    a point's in-sweep delay is proportional to its bearing past that.
    """

    sensor_id: str
    mount: RigidTransform
    sweep_period: float
    azimuth_offset: float
    rays_per_sweep: int = 600
    max_range: float = 250.0


@dataclass(frozen=True)
class ScenarioConfig:
    sensors: tuple[SensorSpec, ...]
    duration: float = 10.0
    frame_rate: float = 10.0
    ego_speed_profile: Profile = field(
        default_factory=lambda: Profile.constant(0.0))
    agents: tuple[AgentSpec, ...] = ()
    annotation_noise_sigma: float = 0.0
    view_bias: bool = False
    rng_seed: int = 0
    landmarks: tuple = ()
    jitter_sigma: float = 0.008
    incidence_min: float = 0.1
    ego_pose_rate: float = 100.0
    view_gap_threshold: float = 0.3
    min_view_points: int = 5

    def __post_init__(self) -> None:
        if self.duration <= 0.0:
            raise ConfigError("duration must be positive")
        if self.frame_rate <= 0.0:
            raise ConfigError("frame_rate must be positive")
        if int(round(self.duration * self.frame_rate)) < 1:
            raise ConfigError("duration too short for a single frame")
        if len(self.sensors) == 0:
            raise ConfigError("at least one sensor is required")
        ids = [s.sensor_id for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise ConfigError("sensor_id values must be unique")
        frame_dt = 1.0 / self.frame_rate
        for sensor in self.sensors:
            if sensor.sweep_period <= 0.0:
                raise ConfigError(
                    f"sensor {sensor.sensor_id!r}: sweep_period must be positive")
            if sensor.sweep_period > frame_dt + 1e-12:
                raise ConfigError(
                    f"sensor {sensor.sensor_id!r}: sweep_period exceeds the "
                    f"frame interval {frame_dt:.6f}")
            if sensor.rays_per_sweep < 4:
                raise ConfigError(
                    f"sensor {sensor.sensor_id!r}: rays_per_sweep too small")
            if sensor.max_range <= 0.0:
                raise ConfigError(
                    f"sensor {sensor.sensor_id!r}: max_range must be positive")
        names = [a.track_id for a in self.agents]
        if len(set(names)) != len(names):
            raise ConfigError("agent track_id values must be unique")
        for agent in self.agents:
            if np.any(agent.dims <= 0.0):
                raise ConfigError(
                    f"agent {agent.track_id!r}: dims must be positive")
        if self.annotation_noise_sigma < 0.0 or self.jitter_sigma < 0.0:
            raise ConfigError("noise sigmas must be non-negative")
        if not 0.0 <= self.incidence_min < 1.0:
            raise ConfigError("incidence_min must lie in [0, 1)")
        if self.ego_pose_rate <= 0.0:
            raise ConfigError("ego_pose_rate must be positive")
        if self.view_gap_threshold <= 0.0:
            raise ConfigError("view_gap_threshold must be positive")
        if self.min_view_points < 1:
            raise ConfigError("min_view_points must be at least 1")
        object.__setattr__(self, "sensors", tuple(self.sensors))
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(
            self, "landmarks",
            tuple(np.asarray(p, dtype=float).reshape(3) for p in self.landmarks))


@dataclass(frozen=True)
class SensorScan:
    """Raw returns of one sensor over one frame, in the sensor's own frame."""

    sensor_id: str
    positions: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        lab = np.asarray(self.labels, dtype=object).reshape(-1)
        if not (len(pos) == len(ts) == len(lab)):
            raise DataError("scan positions, timestamps and labels must align")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.timestamps)

    def to_points(self) -> list[TimedPoint]:
        return [
            TimedPoint(self.positions[i], self.timestamps[i], self.sensor_id)
            for i in range(len(self))
        ]


@dataclass(frozen=True)
class AgentFrameState:
    """True kinematic state of one agent at one frame's reference time."""

    frame: int
    t_star: float
    center_world: np.ndarray
    center_vehicle: np.ndarray
    speed: float
    heading_world: float
    heading_vehicle: float
    d_true: float


@dataclass(frozen=True)
class SensorViewBox:
    """True box around one sensor's view: the agent pose at the view's
    mean sampling time, expressed in the vehicle frame at t_star."""

    frame: int
    track_id: str
    sensor_id: str
    box: AnnotatedBox
    mean_tau: float
    n_points: int


@dataclass(frozen=True)
class GroundTruth:
    ego_traj: PoseTrajectory
    delta_t: float
    frame_times: tuple
    agent_states: dict
    per_sensor_boxes: tuple
    point_labels: tuple
    view_counts: dict
    dims: dict
    categories: dict


@dataclass(frozen=True)
class MetricsReport:
    """Scalar scores plus per-frame series for one track's pipeline output."""

    track_id: str
    scalars: dict
    series: dict


def _heading_axes(heading):
    c, s = np.cos(heading), np.sin(heading)
    u = np.array([c, s, 0.0])
    v = np.array([-s, c, 0.0])
    return u, v


def _yaw_matrix(heading: float) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class _AgentPath:
    """World-frame agent trajectory integrated from its profiles.

    Constant-heading paths use the speed profile's exact antiderivative;
    otherwise segments between profile knots are integrated with fixed
    Gauss-Legendre quadrature, which is exact to machine precision for
    the smooth integrand.
    """

    def __init__(self, spec: AgentSpec):
        self._spec = spec
        self._straight = spec.heading_profile.is_constant
        if not self._straight:
            breaks = np.union1d(spec.speed_profile.times,
                                spec.heading_profile.times)
            nodes, weights = np.polynomial.legendre.leggauss(20)
            self._nodes = nodes
            self._weights = weights
            cum = np.zeros((breaks.size, 2))
            for i in range(breaks.size - 1):
                cum[i + 1] = cum[i] + self._segment(
                    np.array([breaks[i]]), np.array([breaks[i + 1]]))[0]
            self._breaks = breaks
            self._cum = cum
            self._origin = self._cum_at(np.array([0.0]))[0]

    def _segment(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        mid = (a + b) / 2.0
        half = (b - a) / 2.0
        ts = mid[:, None] + half[:, None] * self._nodes[None, :]
        s = self._spec.speed_profile.value(ts.ravel()).reshape(ts.shape)
        th = self._spec.heading_profile.value(ts.ravel()).reshape(ts.shape)
        dx = half * np.sum(self._weights * s * np.cos(th), axis=1)
        dy = half * np.sum(self._weights * s * np.sin(th), axis=1)
        return np.stack([dx, dy], axis=1)

    def _cum_at(self, tq: np.ndarray) -> np.ndarray:
        idx = np.clip(np.searchsorted(self._breaks, tq, side="right") - 1,
                      0, self._breaks.size - 1)
        return self._cum[idx] + self._segment(self._breaks[idx], tq)

    def center(self, times) -> np.ndarray:
        tq = np.atleast_1d(np.asarray(times, dtype=float))
        if self._straight:
            d = self._spec.speed_profile.antiderivative(tq) \
                - self._spec.speed_profile.antiderivative(0.0)
            u, _ = _heading_axes(self._spec.heading_profile.values[0])
            return self._spec.init_pos + np.outer(d, u)
        planar = self._cum_at(tq) - self._origin
        out = np.tile(self._spec.init_pos, (tq.size, 1))
        out[:, :2] += planar
        return out

    def heading(self, times):
        return self._spec.heading_profile.value(times)

    def speed(self, times):
        return self._spec.speed_profile.value(times)

    def distance(self, times):
        """Signed along-path distance travelled since the scene start."""
        return self._spec.speed_profile.antiderivative(times) \
            - self._spec.speed_profile.antiderivative(0.0)


def _ego_trajectory(cfg: ScenarioConfig, t_end: float) -> PoseTrajectory:
    n_grid = max(2, int(round(cfg.ego_pose_rate * t_end)) + 1)
    times = np.linspace(0.0, t_end, n_grid)
    interior = cfg.ego_speed_profile.times
    interior = interior[(interior > 0.0) & (interior < t_end)]
    times = np.union1d(times, interior)
    x = cfg.ego_speed_profile.antiderivative(times) \
        - cfg.ego_speed_profile.antiderivative(0.0)
    eye = np.eye(3)
    return PoseTrajectory([
        (float(t), RigidTransform(eye, np.array([xi, 0.0, 0.0])))
        for t, xi in zip(times, x)
    ])


def _grid_resolution(rays_per_sweep: int) -> int:
    # spread the ray budget over a nominal target's handful of faces
    return max(2, int(round(np.sqrt(rays_per_sweep / 6.0))))


def _face_grid(dims: np.ndarray, axis: int, sign: float,
               g: int) -> tuple[np.ndarray, np.ndarray]:
    free = [i for i in range(3) if i != axis]
    fractions = np.linspace(-0.5 + _GRID_INSET, 0.5 - _GRID_INSET, g)
    a, b = np.meshgrid(fractions * dims[free[0]], fractions * dims[free[1]],
                       indexing="ij")
    local = np.empty((g * g, 3))
    local[:, axis] = sign * dims[axis] / 2.0
    local[:, free[0]] = a.ravel()
    local[:, free[1]] = b.ravel()
    normal = np.zeros(3)
    normal[axis] = sign
    return local, normal


def default_config() -> ScenarioConfig:
    """A ready-to-run highway scene: 10 s at 10 Hz, two sensors sweeping
    half a period apart, a fast lead vehicle and a slower one alongside."""
    return ScenarioConfig(
        duration=10.0,
        frame_rate=10.0,
        ego_speed_profile=Profile.constant(15.0),
        agents=(
            AgentSpec(
                track_id="lead",
                init_pos=(25.0, 0.0, 0.85),
                dims=(4.6, 1.9, 1.7),
                speed_profile=Profile.constant(24.0),
                heading_profile=Profile.constant(0.0),
            ),
            AgentSpec(
                track_id="neighbor",
                init_pos=(12.0, -3.5, 0.85),
                dims=(4.2, 1.8, 1.6),
                speed_profile=Profile.constant(17.0),
                heading_profile=Profile.constant(0.0),
            ),
        ),
        sensors=(
            SensorSpec(
                sensor_id="roof",
                mount=RigidTransform(np.eye(3), np.array([0.0, 0.0, 2.0])),
                sweep_period=0.1,
                azimuth_offset=0.0,
                rays_per_sweep=300,
            ),
            SensorSpec(
                sensor_id="bumper",
                mount=RigidTransform(np.eye(3), np.array([2.0, 0.0, 0.6])),
                sweep_period=0.1,
                azimuth_offset=np.pi,
                rays_per_sweep=300,
            ),
        ),
        annotation_noise_sigma=0.05,
        view_bias=True,
        rng_seed=0,
        landmarks=(np.array([60.0, -8.0, 1.5]), np.array([90.0, 7.0, 2.5])),
    )


def generate_scenario(
    cfg: ScenarioConfig,
) -> tuple[GroundTruth, list, list[Superframe]]:
    """Build a full scene: ground truth, per-sensor raw scans, superframes.

    Returns (ground_truth, scans, superframes) where scans is one dict per
    frame mapping sensor_id to that sensor's SensorScan. Everything is a
    deterministic function of the config including its rng_seed.
    """
    n_frames = int(round(cfg.duration * cfg.frame_rate))
    delta_t = 1.0 / cfg.frame_rate
    t_end = n_frames * delta_t
    trajectory = _ego_trajectory(cfg, t_end)
    paths = {a.track_id: _AgentPath(a) for a in cfg.agents}
    specs = {a.track_id: a for a in cfg.agents}
    calibrations = {s.sensor_id: s.mount for s in cfg.sensors}
    rng = np.random.default_rng([cfg.rng_seed, 0])

    frame_times = [k * delta_t for k in range(n_frames)]
    scans: list[dict[str, SensorScan]] = []
    superframes: list[Superframe] = []
    point_labels: list[np.ndarray] = []
    view_boxes: list[SensorViewBox] = []
    view_counts: dict[tuple[int, str], int] = {}
    agent_states: dict[str, list[AgentFrameState]] = \
        {a.track_id: [] for a in cfg.agents}
    points_seen = {a.track_id: 0 for a in cfg.agents}

    for k in range(n_frames):
        t0 = frame_times[k]
        t_star = t0 + delta_t / 2.0
        ref = trajectory.interpolate(t_star)
        ego_yaw = ref.yaw()
        frame_scans: dict[str, SensorScan] = {}
        # per agent: list of (sensor_id, n, mean_tau, lo, hi) view footprints
        footprints: dict[str, list] = {a.track_id: [] for a in cfg.agents}

        for sensor in cfg.sensors:
            sensor_pose = ref @ sensor.mount
            sensor_inv = sensor_pose.inverse()
            mount_inv = sensor.mount.inverse()
            origin = sensor_pose.translation
            positions: list[np.ndarray] = []
            timestamps: list[np.ndarray] = []
            labels: list[str] = []

            for agent in cfg.agents:
                path = paths[agent.track_id]
                c_star = path.center(t_star)[0]
                if np.linalg.norm(c_star - origin) > sensor.max_range:
                    continue
                th_star = float(path.heading(t_star))
                rot_star = _yaw_matrix(th_star)
                g = _grid_resolution(sensor.rays_per_sweep)
                taus_here: list[np.ndarray] = []
                projs_here: list[np.ndarray] = []
                for axis, sign in _FACES:
                    local, n_local = _face_grid(agent.dims, axis, sign, g)
                    normal_star = rot_star @ n_local
                    face_center = c_star + rot_star @ (n_local * agent.dims / 2.0)
                    to_sensor = origin - face_center
                    dist = np.linalg.norm(to_sensor)
                    if dist < 1e-9 \
                            or normal_star @ to_sensor < cfg.incidence_min * dist:
                        continue
                    sampled_star = c_star + local @ rot_star.T
                    in_sensor = sensor_inv.apply(sampled_star)
                    phi = np.arctan2(in_sensor[:, 1], in_sensor[:, 0])
                    tau = t0 + np.mod(phi - sensor.azimuth_offset, _TWO_PI) \
                        / _TWO_PI * sensor.sweep_period
                    centers = path.center(tau)
                    th_tau = np.atleast_1d(path.heading(tau))
                    cos_t, sin_t = np.cos(th_tau), np.sin(th_tau)
                    world = centers + np.stack([
                        local[:, 0] * cos_t - local[:, 1] * sin_t,
                        local[:, 0] * sin_t + local[:, 1] * cos_t,
                        local[:, 2],
                    ], axis=1)
                    normal_tau = np.stack([
                        n_local[0] * cos_t - n_local[1] * sin_t,
                        n_local[0] * sin_t + n_local[1] * cos_t,
                        np.full_like(cos_t, n_local[2]),
                    ], axis=1)
                    noise = rng.normal(0.0, 1.0, len(world))
                    world = world + cfg.jitter_sigma * noise[:, None] * normal_tau
                    rot_v, tra_v = trajectory._interpolate_arrays(tau)
                    in_vehicle = np.einsum("nji,nj->ni", rot_v, world - tra_v)
                    raw = in_vehicle @ mount_inv.rotation.T + mount_inv.translation
                    positions.append(raw)
                    timestamps.append(tau)
                    labels.extend([agent.track_id] * len(raw))
                    points_seen[agent.track_id] += len(raw)
                    # footprint of this face in the frame the refiner sees
                    compensated = (world - ref.translation) @ ref.rotation
                    heading_v = wrap_angle(th_star - ego_yaw)
                    u_v, _ = _heading_axes(heading_v)
                    taus_here.append(tau)
                    projs_here.append(compensated @ u_v)
                if taus_here:
                    tau_all = np.concatenate(taus_here)
                    proj_all = np.concatenate(projs_here)
                    footprints[agent.track_id].append((
                        sensor.sensor_id, len(tau_all), float(tau_all.mean()),
                        float(proj_all.min()), float(proj_all.max()),
                    ))

            for landmark in cfg.landmarks:
                to_sensor = origin - landmark
                dist = np.linalg.norm(to_sensor)
                if dist > sensor.max_range or dist < 1e-9:
                    continue
                in_sensor = sensor_inv.apply(landmark)
                phi = float(np.arctan2(in_sensor[1], in_sensor[0]))
                tau = t0 + np.mod(phi - sensor.azimuth_offset, _TWO_PI) \
                    / _TWO_PI * sensor.sweep_period
                ray = -to_sensor / dist
                world = landmark + cfg.jitter_sigma * rng.normal() * ray
                pose_tau = trajectory.interpolate(tau)
                raw = mount_inv.apply(
                    pose_tau.rotation.T @ (world - pose_tau.translation))
                positions.append(raw.reshape(1, 3))
                timestamps.append(np.array([tau]))
                labels.append("background")

            if positions:
                frame_scans[sensor.sensor_id] = SensorScan(
                    sensor.sensor_id,
                    np.concatenate(positions),
                    np.concatenate(timestamps),
                    np.array(labels, dtype=object),
                )
            else:
                frame_scans[sensor.sensor_id] = SensorScan(
                    sensor.sensor_id, np.empty((0, 3)), np.empty(0),
                    np.empty(0, dtype=object),
                )

        scans.append(frame_scans)
        superframes.append(build_superframe(
            {sid: scan.to_points() for sid, scan in frame_scans.items()},
            trajectory, calibrations, t0, delta_t, frame_id=k,
        ))
        ordered = [frame_scans[sid].labels for sid in sorted(frame_scans)]
        point_labels.append(
            np.concatenate(ordered) if ordered else np.empty(0, dtype=object))

        for agent in cfg.agents:
            path = paths[agent.track_id]
            c_star = path.center(t_star)[0]
            th_star = float(path.heading(t_star))
            heading_v = wrap_angle(th_star - ego_yaw)
            center_v = (c_star - ref.translation) @ ref.rotation
            agent_states[agent.track_id].append(AgentFrameState(
                frame=k, t_star=t_star, center_world=c_star,
                center_vehicle=center_v, speed=float(path.speed(t_star)),
                heading_world=th_star, heading_vehicle=heading_v,
                d_true=float(path.distance(t_star)),
            ))
            views = footprints[agent.track_id]
            for sensor_id, n_pts, mean_tau, _, _ in views:
                c_view = path.center(mean_tau)[0]
                box = AnnotatedBox(
                    t_star, (c_view - ref.translation) @ ref.rotation,
                    agent.dims, heading_v, agent.track_id,
                    category=agent.category,
                )
                view_boxes.append(SensorViewBox(
                    frame=k, track_id=agent.track_id, sensor_id=sensor_id,
                    box=box, mean_tau=mean_tau, n_points=n_pts,
                ))
            spans = sorted(
                (lo, hi) for _, n_pts, _, lo, hi in views
                if n_pts >= cfg.min_view_points)
            if spans:
                count, reach = 1, spans[0][1]
                for lo, hi in spans[1:]:
                    if lo - reach > cfg.view_gap_threshold:
                        count += 1
                    reach = max(reach, hi)
                view_counts[(k, agent.track_id)] = count

    for agent in cfg.agents:
        if points_seen[agent.track_id] == 0:
            _log.warning(
                "agent %r never entered any sensor's range; its scans are empty",
                agent.track_id)

    gt = GroundTruth(
        ego_traj=trajectory,
        delta_t=delta_t,
        frame_times=tuple(frame_times),
        agent_states={tid: tuple(states)
                      for tid, states in agent_states.items()},
        per_sensor_boxes=tuple(view_boxes),
        point_labels=tuple(point_labels),
        view_counts=view_counts,
        dims={a.track_id: a.dims for a in cfg.agents},
        categories={a.track_id: a.category for a in cfg.agents},
    )
    return gt, scans, superframes


def corrupt_annotations(gt: GroundTruth,
                        cfg: ScenarioConfig) -> list[AnnotatedTrack]:
    """Noisy human-style annotations for every agent in the ground truth.

    Per frame the true center is perturbed by isotropic planar Gaussian
    noise; with view_bias on, an extra uniform offset over the distance
    the agent covers in half a frame simulates an annotator who labeled a
    randomly timed sensor view. Headings stay exact.
    """
    rng = np.random.default_rng([cfg.rng_seed, 1])
    tracks = []
    for track_id in sorted(gt.agent_states):
        states = gt.agent_states[track_id]
        if len(states) < 2:
            raise DataError(
                f"agent {track_id!r} has {len(states)} frames; need at least 2")
        boxes = []
        for st in states:
            u, v = _heading_axes(st.heading_vehicle)
            lon, lat = rng.normal(size=2)
            center = st.center_vehicle \
                + cfg.annotation_noise_sigma * (lon * u + lat * v)
            if cfg.view_bias:
                bound = abs(st.speed) * gt.delta_t / 2.0
                center = center + rng.uniform(-bound, bound) * u
            boxes.append(AnnotatedBox(
                st.t_star, center, gt.dims[track_id], st.heading_vehicle,
                track_id, category=gt.categories.get(track_id),
            ))
        tracks.append(AnnotatedTrack(track_id, tuple(boxes), gt.delta_t))
    return tracks


def make_noisy_track(track_id: str = "agent", n: int = 100, dt: float = 0.1,
                     speed: float = 20.0, sigma: float = 0.2,
                     view_bias: bool = True, seed: int = 0,
                     heading: float = 0.0,
                     dims=(4.6, 1.9, 1.7),
                     start=(10.0, 0.0, 0.8)):
    """A noisy constant-speed annotated track without any point clouds.

    Uses the same noise model as corrupt_annotations. Returns the track
    (world frame, ready for path projection) plus the true per-frame
    distances and speeds.
    """
    if n < 2:
        raise DataError("need at least 2 frames")
    rng = np.random.default_rng([seed, 1])
    u, v = _heading_axes(heading)
    origin = np.asarray(start, dtype=float)
    boxes = []
    d_true = np.empty(n)
    for k in range(n):
        t_star = k * dt + dt / 2.0
        d_true[k] = speed * t_star
        center = origin + d_true[k] * u
        lon, lat = rng.normal(size=2)
        center = center + sigma * (lon * u + lat * v)
        if view_bias:
            bound = abs(speed) * dt / 2.0
            center = center + rng.uniform(-bound, bound) * u
        boxes.append(AnnotatedBox(t_star, center, dims, heading, track_id,
                                  frame=WORLD_FRAME))
    track = AnnotatedTrack(track_id, tuple(boxes), dt)
    return track, d_true, np.full(n, float(speed))


def _box_contains(box: AnnotatedBox, points: np.ndarray,
                  tol: float = 1e-9) -> np.ndarray:
    rel = np.asarray(points, dtype=float) - box.center
    c, s = np.cos(box.heading), np.sin(box.heading)
    local = np.stack([
        c * rel[:, 0] + s * rel[:, 1],
        -s * rel[:, 0] + c * rel[:, 1],
        rel[:, 2],
    ], axis=1)
    return np.all(np.abs(local) <= box.dims / 2.0 + tol, axis=1)


def evaluate(estimate: StateEstimate, pseudo, gt: GroundTruth, *,
             track_id: str | None = None,
             superframes: Sequence[Superframe] | None = None,
             annotations: AnnotatedTrack | None = None,
             refine_params: RefineParams | None = None) -> MetricsReport:
    """Score one track's estimate (and optionally its refinement output).

    Speed and position errors always come out; pseudo-box metrics need
    the pseudo boxes, and coverage/containment additionally need the
    superframes (and the input annotations for the cluster re-derivation
    and the original-box baseline).
    """
    if track_id is None:
        if len(gt.agent_states) != 1:
            raise DataError("ground truth holds several agents; pass track_id")
        track_id = next(iter(gt.agent_states))
    if track_id not in gt.agent_states:
        raise DataError(f"unknown track {track_id!r}")
    states = gt.agent_states[track_id]
    n = len(states)
    if len(estimate.states) != n:
        raise AlignmentError(
            f"estimate has {len(estimate.states)} states for {n} frames")

    times = np.array([st.t_star for st in states])
    s_true = np.array([st.speed for st in states])
    d_true = np.array([st.d_true for st in states])
    s_est = np.array([st.s for st in estimate.states])
    d_est = np.array([st.d for st in estimate.states])

    speed_err = s_est - s_true
    # the path datum is arbitrary, so compare distances origin-free
    pos_err = (d_est - d_est[0]) - (d_true - d_true[0])
    scalars = {
        "speed_rmse": float(np.sqrt(np.mean(speed_err ** 2))),
        "speed_tv": float(np.abs(np.diff(s_est)).sum()),
        "position_rmse": float(np.sqrt(np.mean(pos_err ** 2))),
    }
    series = {
        "speed_error": (times.copy(), speed_err),
        "position_error": (times.copy(), pos_err),
        "speed": (times.copy(), s_est.copy()),
    }

    if pseudo is None:
        return MetricsReport(track_id=track_id, scalars=scalars, series=series)

    by_frame: dict[int, list[PseudoBox]] = {}
    for pb in pseudo:
        k = int(np.argmin(np.abs(times - pb.box.t_star)))
        if abs(times[k] - pb.box.t_star) > _TIME_TOL:
            raise AlignmentError(
                f"pseudo box at t={pb.box.t_star} matches no frame")
        by_frame.setdefault(k, []).append(pb)

    counts = np.array([len(by_frame.get(k, [])) for k in range(n)], dtype=float)
    gt_counts = np.array([
        float(gt.view_counts.get((states[k].frame, track_id), 0))
        for k in range(n)
    ])
    center_errors = []
    center_by_frame = np.full(n, np.nan)
    gt_views: dict[int, list[SensorViewBox]] = {}
    for view in gt.per_sensor_boxes:
        if view.track_id == track_id:
            gt_views.setdefault(view.frame, []).append(view)
    for k in range(n):
        frame_views = gt_views.get(states[k].frame, [])
        errs = []
        for pb in by_frame.get(k, []):
            if pb.source_cluster < 0 or not frame_views:
                continue
            err = min(
                float(np.linalg.norm(pb.box.center - view.box.center))
                for view in frame_views
            )
            errs.append(err)
        if errs:
            center_errors.extend(errs)
            center_by_frame[k] = float(np.mean(errs))
    scalars["pseudo_count_match"] = float(np.mean(counts == gt_counts))
    if center_errors:
        scalars["center_error_median"] = float(np.median(center_errors))
    series["pseudo_count"] = (times.copy(), counts)
    series["view_count"] = (times.copy(), gt_counts)
    series["center_error"] = (times.copy(), center_by_frame)

    if superframes is not None:
        frames = list(superframes)
        if len(frames) != n:
            raise AlignmentError(
                f"{len(frames)} superframes given for {n} frames")
        union_cov = np.full(n, np.nan)
        orig_cov = np.full(n, np.nan)
        containment = np.full(n, np.nan)
        params = refine_params if refine_params is not None else RefineParams()
        for k, sf in enumerate(frames):
            labels = gt.point_labels[states[k].frame]
            mask = labels == track_id
            if not mask.any():
                continue
            pts = sf.positions[mask]
            inside = np.zeros(len(pts), dtype=bool)
            for pb in by_frame.get(k, []):
                inside |= _box_contains(pb.box, pts)
            union_cov[k] = float(inside.mean())
            if annotations is not None:
                box = annotations.boxes[k]
                orig_cov[k] = float(_box_contains(box, pts).mean())
                if abs(s_est[k]) >= params.min_refine_speed:
                    roi = collect_roi_points(sf, box, float(s_est[k]), params)
                    clusters = cluster_along_heading(
                        sf, roi, box.heading, params)
                    fracs = []
                    for pb in by_frame.get(k, []):
                        j = pb.source_cluster
                        if 0 <= j < len(clusters):
                            member = sf.positions[clusters[j].indices]
                            fracs.append(
                                float(_box_contains(pb.box, member).mean()))
                    if fracs:
                        containment[k] = min(fracs)
        series["union_coverage"] = (times.copy(), union_cov)
        if np.isfinite(union_cov).any():
            scalars["union_coverage_min"] = float(np.nanmin(union_cov))
        if annotations is not None:
            series["original_coverage"] = (times.copy(), orig_cov)
            series["cluster_containment"] = (times.copy(), containment)
            if np.isfinite(orig_cov).any():
                scalars["original_coverage_min"] = float(np.nanmin(orig_cov))
            if np.isfinite(containment).any():
                scalars["cluster_containment_min"] = \
                    float(np.nanmin(containment))

    return MetricsReport(track_id=track_id, scalars=scalars, series=series)
