import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from annorefine.errors import DataError
from annorefine.geometry import PoseTrajectory, RigidTransform
from annorefine.tracks import (
    VEHICLE_FRAME,
    WORLD_FRAME,
    AnnotatedBox,
    AnnotatedTrack,
    KinematicState,
    MeasurementSeries,
    boxes_to_world,
    measure,
    project_to_path,
    transition,
)

DIMS = (4.5, 1.9, 1.6)


def make_track(centers, headings, dt=0.1, frame=WORLD_FRAME,
               track_id="obj"):
    boxes = tuple(
        AnnotatedBox(k * dt + dt / 2.0, c, DIMS, h, track_id, frame)
        for k, (c, h) in enumerate(zip(centers, headings))
    )
    return AnnotatedTrack(track_id, boxes, dt)


# ---------------------------------------------------------------------------
# box and track validation
# ---------------------------------------------------------------------------

def test_box_normalizes_heading_and_checks_shapes():
    box = AnnotatedBox(0.05, [1.0, 2.0, 0.8], DIMS, 3.0 * np.pi, "a")
    assert box.heading == pytest.approx(np.pi)
    assert box.frame == VEHICLE_FRAME
    with pytest.raises(DataError):
        AnnotatedBox(0.0, [1.0, 2.0], DIMS, 0.0, "a")
    with pytest.raises(DataError):
        AnnotatedBox(0.0, [1.0, 2.0, 0.8], (4.0, 0.0, 1.5), 0.0, "a")
    with pytest.raises(DataError):
        AnnotatedBox(0.0, [1.0, 2.0, 0.8], DIMS, 0.0, "a", frame="map")


def test_heading_axis_is_a_planar_unit_vector():
    for h in np.linspace(-3.0, 3.0, 7):
        axis = AnnotatedBox(0.0, np.zeros(3), DIMS, h, "a").heading_axis()
        assert_allclose(axis, [np.cos(h), np.sin(h), 0.0], atol=1e-12)


def test_track_validation():
    centers = [np.array([float(k), 0.0, 0.8]) for k in range(4)]
    good = make_track(centers, np.zeros(4))
    assert len(good) == 4
    assert good.frame == WORLD_FRAME
    assert_allclose(good.times, [0.05, 0.15, 0.25, 0.35])

    with pytest.raises(DataError):
        AnnotatedTrack("solo", good.boxes[:1], 0.1)
    with pytest.raises(DataError):
        # one frame missing: the gap doubles and breaks the 10% tolerance
        AnnotatedTrack("gap", good.boxes[:2] + good.boxes[3:], 0.1)
    mixed = good.boxes[:3] + (
        AnnotatedBox(0.35, centers[3], DIMS, 0.0, "obj", VEHICLE_FRAME),)
    with pytest.raises(DataError):
        AnnotatedTrack("mixed", mixed, 0.1)


def test_measurement_series_validation():
    with pytest.raises(DataError):
        MeasurementSeries("a", [0.0, 0.1], [0.0], [0.0, 0.0])
    with pytest.raises(DataError):
        MeasurementSeries("a", [0.1, 0.1], [0.0, 1.0], [0.0, 0.0])
    series = MeasurementSeries("a", [0.0, 0.1, 0.2], [0.0, 1.0, 2.0],
                               [0.0, 0.0, 0.0])
    sub = series.window(1, 3)
    assert_allclose(sub.times, [0.1, 0.2])
    assert_allclose(sub.d, [1.0, 2.0])


# ---------------------------------------------------------------------------
# vehicle -> world lifting
# ---------------------------------------------------------------------------

def test_boxes_to_world_uses_the_pose_at_each_frame():
    # ego drives +x at 10 m/s while yawing at 0.2 rad/s
    knots = [
        (t, RigidTransform(
            Rotation.from_euler("z", 0.2 * t).as_matrix(),
            np.array([10.0 * t, 0.0, 0.0])))
        for t in np.linspace(0.0, 1.0, 11)
    ]
    traj = PoseTrajectory(knots)
    centers = [np.array([12.0, 1.0, 0.8])] * 3
    track = make_track(centers, [0.3] * 3, frame=VEHICLE_FRAME)
    world = boxes_to_world(track, traj)
    assert world.frame == WORLD_FRAME
    for box_v, box_w in zip(track.boxes, world.boxes):
        pose = traj.interpolate(box_v.t_star)
        assert_allclose(box_w.center, pose.apply(box_v.center), atol=1e-12)
        assert box_w.heading == pytest.approx(0.3 + 0.2 * box_v.t_star)
    with pytest.raises(DataError):
        boxes_to_world(world, traj)


# ---------------------------------------------------------------------------
# path projection
# ---------------------------------------------------------------------------

def test_projection_recovers_path_length_on_a_curve():
    # constant-speed motion on a circle: the circular mean of the endpoint
    # headings is exactly the chord direction, so each increment equals the
    # chord length and d is the polyline length of the path
    radius, speed, dt = 40.0, 12.0, 0.1
    n = 30
    omega = speed / radius
    times = np.arange(n) * dt + dt / 2.0
    centers = np.stack([
        radius * np.sin(omega * times),
        radius * (1.0 - np.cos(omega * times)),
        np.full(n, 0.8),
    ], axis=1)
    headings = omega * times
    series = project_to_path(make_track(centers, headings))
    chord = 2.0 * radius * np.sin(omega * dt / 2.0)
    assert_allclose(series.d, chord * np.arange(n), atol=1e-9)
    assert series.d[0] == 0.0
    # the chord sum underestimates the arc length only at O((omega*dt)^2)
    assert_allclose(series.d, speed * (times - times[0]), rtol=1e-4)


def test_projection_ignores_lateral_noise():
    rng = np.random.default_rng(8)
    n, dt, speed, heading = 40, 0.1, 18.0, 0.7
    u = np.array([np.cos(heading), np.sin(heading), 0.0])
    v = np.array([-np.sin(heading), np.cos(heading), 0.0])
    times = np.arange(n) * dt + dt / 2.0
    lateral = rng.normal(0.0, 0.5, n)
    centers = np.outer(speed * times, u) + np.outer(lateral, v)
    series = project_to_path(make_track(centers, np.full(n, heading)))
    assert_allclose(series.d, speed * (times - times[0]), atol=1e-9)


def test_projection_unwraps_headings_across_the_seam():
    # headings hop across +/-pi; unwrapped output must stay continuous
    n, dt = 12, 0.1
    raw = np.pi - 0.05 + 0.02 * np.arange(n)
    wrapped = np.arctan2(np.sin(raw), np.cos(raw))
    times = np.arange(n) * dt + dt / 2.0
    centers = np.stack([
        5.0 * times * np.cos(raw), 5.0 * times * np.sin(raw),
        np.full(n, 0.8)], axis=1)
    series = project_to_path(make_track(centers, wrapped))
    assert np.all(np.abs(np.diff(series.headings)) < 0.1)
    assert_allclose(series.headings, raw, atol=1e-12)


def test_projection_direction_is_the_circular_mean():
    # a single step with headings 170 and -170 degrees: the mean direction
    # is 180, so only the -x displacement component counts
    centers = [np.zeros(3), np.array([-2.0, 0.7, 0.0])]
    headings = [np.deg2rad(170.0), np.deg2rad(-170.0)]
    series = project_to_path(make_track(centers, headings))
    assert series.d[1] == pytest.approx(2.0, abs=1e-12)


def test_projection_requires_world_frame():
    centers = [np.array([float(k), 0.0, 0.8]) for k in range(3)]
    track = make_track(centers, np.zeros(3), frame=VEHICLE_FRAME)
    with pytest.raises(DataError):
        project_to_path(track)


# ---------------------------------------------------------------------------
# kinematic model
# ---------------------------------------------------------------------------

def test_transition_integrates_constant_acceleration():
    state = KinematicState(2.0, 5.0)
    out = transition(state, u=1.5, dt=0.2)
    assert out.d == pytest.approx(2.0 + 5.0 * 0.2 + 0.5 * 1.5 * 0.04)
    assert out.s == pytest.approx(5.0 + 1.5 * 0.2)
    assert measure(out) == out.d
    assert_allclose(state.as_array(), [2.0, 5.0])
