"""SE(3) poses, pose interpolation, and multi-LiDAR motion compensation.

The pipeline works in three frames: each sensor's own frame, the vehicle
frame, and a fixed world frame.  A scan point captured at time tau in a
sensor frame is lifted to the world through the (time-constant) sensor
extrinsic and the vehicle pose at tau, then expressed in the vehicle frame
at a common reference time.  Accumulating the compensated points of all
sensors over one frame interval yields a superframe.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import CalibrationMissingError, DataError, OutOfRangeError

_TIME_EPS = 1e-9


def wrap_angle(theta):
    """Wrap an angle (or array of angles) to the interval (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.ndim(theta) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class RigidTransform:
    """A rigid-body transform: x_out = rotation @ x_in + translation.

    Parameters
    ----------
    rotation : (3, 3) ndarray
        Orthonormal rotation matrix with determinant +1.
    translation : (3,) ndarray
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float)
        tra = np.asarray(self.translation, dtype=float)
        if rot.shape != (3, 3):
            raise DataError(f"rotation must be (3, 3), got {rot.shape}")
        if tra.shape != (3,):
            raise DataError(f"translation must be (3,), got {tra.shape}")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6 or np.linalg.det(rot) < 0.0:
            raise DataError("rotation matrix is not orthonormal")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, quaternion, translation) -> "RigidTransform":
        """Build from a (w, x, y, z) quaternion and a translation."""
        q = np.asarray(quaternion, dtype=float)
        if q.shape != (4,):
            raise DataError(f"quaternion must be (4,), got {q.shape}")
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-3:
            raise DataError(f"quaternion norm {norm:.6f} too far from 1")
        rot = Rotation.from_quat(np.array([q[1], q[2], q[3], q[0]]) / norm)
        return cls(rot.as_matrix(), translation)

    def to_quaternion(self) -> np.ndarray:
        """Return the rotation as a (w, x, y, z) quaternion with w >= 0."""
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        q = np.array([w, x, y, z])
        if q[0] < 0.0:
            q = -q
        return q

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=float)
        if m.shape != (4, 4):
            raise DataError(f"homogeneous matrix must be (4, 4), got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Transform one point (3,) or many points (N, 3)."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self @ other (apply ``other`` first, then ``self``)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def yaw(self) -> float:
        """Heading of the transformed x axis in the XY plane."""
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))


class PoseTrajectory:
    """Time-indexed vehicle poses (world <- vehicle) with interpolation.

    Between knots the translation is interpolated linearly and the rotation
    along the geodesic, which is exact for constant linear and angular
    velocity.

    Parameters
    ----------
    knots : sequence of (float, RigidTransform)
        Strictly increasing timestamps with the pose at each time.
    """

    def __init__(self, knots: Sequence[tuple[float, "RigidTransform"]]):
        if len(knots) == 0:
            raise DataError("trajectory needs at least one knot")
        times = np.array([float(t) for t, _ in knots])
        if np.any(np.diff(times) <= 0.0):
            raise DataError("trajectory knot times must be strictly increasing")
        self._times = times
        self._translations = np.array([p.translation for _, p in knots])
        self._rotations = Rotation.from_matrix(
            np.array([p.rotation for _, p in knots])
        )
        self._slerp = Slerp(times, self._rotations) if len(knots) > 1 else None
        self.knots = [(float(t), p) for t, p in knots]

    def __len__(self) -> int:
        return len(self._times)

    @property
    def span(self) -> tuple[float, float]:
        return float(self._times[0]), float(self._times[-1])

    def _check_range(self, times: np.ndarray) -> np.ndarray:
        lo, hi = self.span
        if times.min() < lo - _TIME_EPS or times.max() > hi + _TIME_EPS:
            raise OutOfRangeError(
                f"query times [{times.min():.6f}, {times.max():.6f}] outside "
                f"trajectory span [{lo:.6f}, {hi:.6f}]"
            )
        return np.clip(times, lo, hi)

    def _interpolate_arrays(self, times) -> tuple[np.ndarray, np.ndarray]:
        """Batch interpolation; returns rotations (N, 3, 3) and translations (N, 3)."""
        t = self._check_range(np.atleast_1d(np.asarray(times, dtype=float)))
        if len(self) == 1:
            rot = np.broadcast_to(self._rotations.as_matrix(), (len(t), 3, 3))
            tra = np.broadcast_to(self._translations[0], (len(t), 3))
            return np.array(rot), np.array(tra)
        rot = self._slerp(t).as_matrix()
        tra = np.empty((len(t), 3))
        for axis in range(3):
            tra[:, axis] = np.interp(t, self._times, self._translations[:, axis])
        return rot, tra

    def interpolate(self, t: float) -> RigidTransform:
        rot, tra = self._interpolate_arrays([t])
        return RigidTransform(rot[0], tra[0])


def interpolate_pose(trajectory: PoseTrajectory, t: float) -> RigidTransform:
    """Pose at time t, linear in translation and geodesic in rotation."""
    return trajectory.interpolate(t)


@dataclass(frozen=True)
class TimedPoint:
    """A single LiDAR return with its capture time and source sensor."""

    position: np.ndarray
    timestamp: float
    sensor_id: str

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if pos.shape != (3,):
            raise DataError(f"point position must be (3,), got {pos.shape}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "sensor_id", str(self.sensor_id))


@dataclass(frozen=True)
class Superframe:
    """Motion-compensated union of all sensors' points over one frame interval.

    Positions are expressed in the vehicle frame at ``t_star``, the midpoint
    of the interval.  Point order is the ingestion order, which downstream
    per-point labels rely on.
    """

    t_star: float
    delta_t: float
    positions: np.ndarray
    timestamps: np.ndarray
    sensor_ids: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        ids = np.asarray(self.sensor_ids).reshape(-1)
        if not (len(pos) == len(ts) == len(ids)):
            raise DataError("positions, timestamps and sensor_ids must align")
        half = self.delta_t / 2.0 + _TIME_EPS
        if len(ts) and (ts.min() < self.t_star - half or ts.max() > self.t_star + half):
            raise DataError("superframe timestamps outside the frame interval")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "sensor_ids", ids)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def points(self) -> list[TimedPoint]:
        return [
            TimedPoint(self.positions[i], self.timestamps[i], self.sensor_ids[i])
            for i in range(len(self))
        ]


def _compensate_arrays(positions, timestamps, trajectory, calibration, t_star):
    """Vectorized core of motion compensation; returns (N, 3) positions."""
    p_vehicle = calibration.apply(np.asarray(positions, dtype=float))
    rot, tra = trajectory._interpolate_arrays(timestamps)
    p_world = np.einsum("nij,nj->ni", rot, p_vehicle) + tra
    ref = trajectory.interpolate(t_star)
    return (p_world - ref.translation) @ ref.rotation


def motion_compensate(
    points: Sequence[TimedPoint],
    trajectory: PoseTrajectory,
    calibration: RigidTransform,
    t_star: float,
) -> list[TimedPoint]:
    """Re-express sensor-frame points in the vehicle frame at ``t_star``.

    Each point is lifted through the sensor extrinsic and the vehicle pose
    at its own capture time, then pulled back with the inverse vehicle pose
    at the reference time.  Timestamps and sensor ids are preserved.
    """
    if len(points) == 0:
        return []
    positions = np.array([p.position for p in points])
    timestamps = np.array([p.timestamp for p in points])
    compensated = _compensate_arrays(
        positions, timestamps, trajectory, calibration, t_star
    )
    return [
        TimedPoint(compensated[i], points[i].timestamp, points[i].sensor_id)
        for i in range(len(points))
    ]


def build_superframe(
    scans: Iterable[TimedPoint] | Mapping[str, Sequence[TimedPoint]],
    trajectory: PoseTrajectory,
    calibrations: Mapping[str, RigidTransform],
    t: float,
    delta_t: float,
    *,
    frame_id: int = 0,
) -> Superframe:
    """Assemble the compensated union of all scans over [t, t + delta_t].

    ``scans`` is either a flat iterable of points or a mapping from sensor
    id to that sensor's points; a mapping is flattened in sorted sensor-id
    order.  Every point must carry a timestamp inside the interval and a
    sensor id present in ``calibrations``.
    """
    if delta_t <= 0.0:
        raise DataError(f"delta_t must be positive, got {delta_t}")
    if isinstance(scans, Mapping):
        flat: list[TimedPoint] = []
        for sensor_id in sorted(scans):
            flat.extend(scans[sensor_id])
    else:
        flat = list(scans)

    t_star = t + delta_t / 2.0
    if not flat:
        return Superframe(
            t_star, delta_t, np.empty((0, 3)), np.empty(0),
            np.empty(0, dtype=object), frame_id,
        )

    positions = np.array([p.position for p in flat])
    timestamps = np.array([p.timestamp for p in flat])
    sensor_ids = np.array([p.sensor_id for p in flat], dtype=object)

    if timestamps.min() < t - _TIME_EPS or timestamps.max() > t + delta_t + _TIME_EPS:
        raise DataError(
            f"scan timestamps [{timestamps.min():.6f}, {timestamps.max():.6f}] "
            f"outside frame interval [{t:.6f}, {t + delta_t:.6f}]"
        )

    compensated = np.empty_like(positions)
    for sensor_id in sorted(set(sensor_ids.tolist())):
        if sensor_id not in calibrations:
            raise CalibrationMissingError(f"no calibration for sensor {sensor_id!r}")
        mask = sensor_ids == sensor_id
        compensated[mask] = _compensate_arrays(
            positions[mask], timestamps[mask], trajectory,
            calibrations[sensor_id], t_star,
        )
    return Superframe(t_star, delta_t, compensated, timestamps, sensor_ids, frame_id)
