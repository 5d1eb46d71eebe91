"""Annotated object tracks and their reduction to along-path coordinates.

Human-annotated boxes carry accurate headings, so an object's planar motion
is summarized by two scalars: the cumulative distance d along its own path
and the speed s.  The kinematic model is a constant-acceleration integrator
with the acceleration as its input; measurements observe d only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .geometry import PoseTrajectory, interpolate_pose, wrap_angle

VEHICLE_FRAME = "vehicle"
WORLD_FRAME = "world"


@dataclass(frozen=True)
class AnnotatedBox:
    """An oriented 3D box annotation at one frame time.

    ``dims`` is (length, width, height) with length along the heading.
    ``frame`` tags the coordinate frame of ``center`` and ``heading``:
    ``"vehicle"`` (ego frame at the frame's reference time) or ``"world"``.
    """

    t_star: float
    center: np.ndarray
    dims: np.ndarray
    heading: float
    track_id: str
    frame: str = VEHICLE_FRAME
    category: str | None = None

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        dims = np.asarray(self.dims, dtype=float)
        if center.shape != (3,):
            raise DataError(f"box center must be (3,), got {center.shape}")
        if dims.shape != (3,) or np.any(dims <= 0.0):
            raise DataError("box dims must be three positive extents")
        if self.frame not in (VEHICLE_FRAME, WORLD_FRAME):
            raise DataError(f"unknown frame tag {self.frame!r}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))
        object.__setattr__(self, "t_star", float(self.t_star))

    def heading_axis(self) -> np.ndarray:
        """Unit vector along the heading in the XY plane."""
        return np.array([np.cos(self.heading), np.sin(self.heading), 0.0])


@dataclass(frozen=True)
class AnnotatedTrack:
    """One object's box annotations over consecutive frames.

    Requires at least two boxes, strictly increasing times, spacing within
    10% of the nominal frame period ``delta_t``, and a single common frame
    tag.
    """

    track_id: str
    boxes: tuple
    delta_t: float

    def __post_init__(self):
        boxes = tuple(self.boxes)
        if len(boxes) < 2:
            raise DataError(f"track {self.track_id!r} needs >= 2 boxes")
        times = np.array([b.t_star for b in boxes])
        gaps = np.diff(times)
        if np.any(gaps <= 0.0):
            raise DataError(f"track {self.track_id!r} times are not increasing")
        if np.any(np.abs(gaps - self.delta_t) > 0.1 * self.delta_t):
            raise DataError(
                f"track {self.track_id!r} frame spacing deviates more than "
                f"10% from delta_t={self.delta_t}"
            )
        frames = {b.frame for b in boxes}
        if len(frames) != 1:
            raise DataError(f"track {self.track_id!r} mixes coordinate frames")
        object.__setattr__(self, "boxes", boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def frame(self) -> str:
        return self.boxes[0].frame

    @property
    def times(self) -> np.ndarray:
        return np.array([b.t_star for b in self.boxes])


@dataclass(frozen=True)
class KinematicState:
    """Along-path state: cumulative distance d and speed s."""

    d: float
    s: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.s])


@dataclass(frozen=True)
class MeasurementSeries:
    """Projected along-path measurements for one track.

    ``headings`` is the unwrapped (continuous) heading sequence; ``d`` is
    the cumulative signed distance with d[0] = 0 by convention.
    """

    track_id: str
    times: np.ndarray
    d: np.ndarray
    headings: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        d = np.asarray(self.d, dtype=float)
        headings = np.asarray(self.headings, dtype=float)
        if not (times.shape == d.shape == headings.shape) or times.ndim != 1:
            raise DataError("series times, d and headings must be equal-length 1-D")
        if len(times) >= 2 and np.any(np.diff(times) <= 0.0):
            raise DataError("series times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "headings", headings)

    def __len__(self) -> int:
        return len(self.times)

    def window(self, start: int, stop: int) -> "MeasurementSeries":
        """Sub-series over [start, stop)."""
        return MeasurementSeries(
            self.track_id, self.times[start:stop], self.d[start:stop],
            self.headings[start:stop],
        )


def boxes_to_world(track: AnnotatedTrack, trajectory: PoseTrajectory) -> AnnotatedTrack:
    """Lift a vehicle-frame track into the world frame via the ego poses."""
    if track.frame != VEHICLE_FRAME:
        raise DataError(f"track {track.track_id!r} is not in the vehicle frame")
    out = []
    for box in track.boxes:
        pose = interpolate_pose(trajectory, box.t_star)
        out.append(
            AnnotatedBox(
                box.t_star,
                pose.apply(box.center),
                box.dims,
                wrap_angle(box.heading + pose.yaw()),
                box.track_id,
                WORLD_FRAME,
                box.category,
            )
        )
    return AnnotatedTrack(track.track_id, tuple(out), track.delta_t)


def _circular_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.arctan2(np.sin(a) + np.sin(b), np.cos(a) + np.cos(b))


def project_to_path(track: AnnotatedTrack) -> MeasurementSeries:
    """Collapse world-frame box centers to cumulative along-path distances.

    Each consecutive center displacement is projected onto the direction of
    the circular mean of the two frames' headings, so lateral annotation
    noise does not contaminate d.  d[0] = 0 anchors the path at the first
    frame.
    """
    if track.frame != WORLD_FRAME:
        raise DataError(
            f"track {track.track_id!r} must be in the world frame; "
            "apply boxes_to_world first"
        )
    centers = np.array([b.center for b in track.boxes])
    headings = np.unwrap(np.array([b.heading for b in track.boxes]))
    mid = _circular_mean(headings[:-1], headings[1:])
    direction = np.stack(
        [np.cos(mid), np.sin(mid), np.zeros_like(mid)], axis=1
    )
    increments = np.einsum("ij,ij->i", np.diff(centers, axis=0), direction)
    d = np.concatenate([[0.0], np.cumsum(increments)])
    return MeasurementSeries(track.track_id, track.times, d, headings)


def transition(state: KinematicState, u: float, dt: float) -> KinematicState:
    """Advance the along-path state by dt under constant acceleration u."""
    return KinematicState(
        state.d + state.s * dt + 0.5 * u * dt * dt,
        state.s + u * dt,
    )


def measure(state: KinematicState) -> float:
    """The measurement model: annotations observe the path distance only."""
    return state.d
