import numpy as np
import pytest
from numpy.testing import assert_allclose

from annorefine.errors import AlignmentError, DataError
from annorefine.estimators import StateEstimate
from annorefine.geometry import Superframe
from annorefine.refine import (
    RefineParams,
    anchor_box,
    cluster_along_heading,
    collect_roi_points,
    find_orientation_anchor,
    generate_pseudo_boxes,
    refine_track,
    speed_compensate,
)
from annorefine.tracks import AnnotatedBox, AnnotatedTrack, KinematicState


def make_superframe(positions, timestamps, sensors, t_star=0.05, delta_t=0.1,
                    frame_id=0):
    positions = np.asarray(positions, dtype=float)
    return Superframe(
        t_star, delta_t, positions,
        np.asarray(timestamps, dtype=float),
        np.asarray(sensors, dtype=object),
        frame_id,
    )


def box_contains(box, points, tol=1e-9):
    rel = np.asarray(points, dtype=float) - box.center
    c, s = np.cos(box.heading), np.sin(box.heading)
    local = np.stack(
        [c * rel[:, 0] + s * rel[:, 1],
         -s * rel[:, 0] + c * rel[:, 1],
         rel[:, 2]],
        axis=1,
    )
    return np.all(np.abs(local) <= box.dims / 2.0 + tol, axis=1)


# ---------------------------------------------------------------------------
# ROI collection
# ---------------------------------------------------------------------------

def test_roi_expansion_boundaries_along_heading():
    box = AnnotatedBox(0.05, [10.0, 0.0, 0.75], [4.0, 2.0, 1.5], 0.0, "a")
    params = RefineParams(roi_margin=0.5)
    # expansion: |s| * dt / 2 + margin = 10 * 0.05 + 0.5 = 1.0 per end
    pts = np.array([
        [7.01, 0.0, 0.75],   # just inside the rear limit x = 7
        [6.99, 0.0, 0.75],   # just outside
        [12.99, 0.0, 0.75],  # just inside the front limit x = 13
        [13.01, 0.0, 0.75],  # just outside
        [10.0, 1.49, 0.75],  # inside lateral limit 1.5
        [10.0, 1.51, 0.75],  # outside
        [10.0, 0.0, 1.99],   # inside vertical limit 0.75 + 1.25
        [10.0, 0.0, 2.01],   # outside
    ])
    sf = make_superframe(pts, np.full(len(pts), 0.05), ["s0"] * len(pts))
    idx = collect_roi_points(sf, box, 10.0, params)
    assert sorted(idx.tolist()) == [0, 2, 4, 6]


def test_roi_follows_box_rotation():
    heading = np.pi / 2
    box = AnnotatedBox(0.05, [0.0, 10.0, 0.0], [4.0, 2.0, 1.0], heading, "a")
    params = RefineParams(roi_margin=0.5)
    pts = np.array([
        [0.0, 12.9, 0.0],   # within front expansion along +y
        [0.0, 13.1, 0.0],
        [1.4, 10.0, 0.0],   # lateral is x now
        [1.6, 10.0, 0.0],
    ])
    sf = make_superframe(pts, np.full(len(pts), 0.05), ["s0"] * len(pts))
    idx = collect_roi_points(sf, box, 10.0, params)
    assert sorted(idx.tolist()) == [0, 2]


def test_roi_expansion_uses_absolute_speed():
    box = AnnotatedBox(0.05, [0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0, "a")
    pts = np.array([[-1.9, 0.0, 0.0]])
    sf = make_superframe(pts, [0.05], ["s0"])
    params = RefineParams(roi_margin=0.5)
    # reach 1 + |s| * dt / 2 + 0.5: 2.0 when s = -10, only 1.5 when parked
    assert collect_roi_points(sf, box, -10.0, params).tolist() == [0]
    assert collect_roi_points(sf, box, 0.0, params).tolist() == []


# ---------------------------------------------------------------------------
# clustering along the heading
# ---------------------------------------------------------------------------

def two_group_superframe():
    rear_x = np.linspace(10.0, 10.2, 6)
    front_x = np.linspace(12.0, 12.2, 6)
    xs = np.concatenate([front_x, rear_x])  # deliberately unsorted input
    pts = np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], axis=1)
    taus = np.array([0.08] * 6 + [0.02] * 6)
    sensors = ["b", "b", "b", "b", "a", "b"] + ["a", "a", "b", "a", "b", "a"]
    return make_superframe(pts, taus, sensors)


def test_clusters_split_order_and_metadata():
    sf = two_group_superframe()
    clusters = cluster_along_heading(sf, np.arange(len(sf)), 0.0, RefineParams())
    assert len(clusters) == 2
    rear, front = clusters
    assert rear.span[0] == pytest.approx(10.0) and rear.span[1] == pytest.approx(10.2)
    assert front.span[0] == pytest.approx(12.0)
    assert rear.dominant_sensor == "a"   # 4 of 6 points
    assert front.dominant_sensor == "b"  # 5 of 6 points
    assert rear.mean_tau == pytest.approx(0.02)
    assert front.mean_tau == pytest.approx(0.08)
    assert sorted(rear.indices.tolist()) == list(range(6, 12))


def test_gap_threshold_is_strict():
    xs = np.array([0.0, 0.3, 0.6, 0.91])  # third gap barely exceeds 0.3
    pts = np.stack([xs, np.zeros(4), np.zeros(4)], axis=1)
    sf = make_superframe(pts, np.full(4, 0.05), ["s"] * 4)
    params = RefineParams(min_cluster_points=1)
    clusters = cluster_along_heading(sf, np.arange(4), 0.0, params)
    assert [len(c.indices) for c in clusters] == [3, 1]


def test_small_groups_are_dropped():
    xs = np.concatenate([np.linspace(0, 0.1, 6), [5.0, 5.05]])
    pts = np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], axis=1)
    sf = make_superframe(pts, np.full(len(xs), 0.05), ["s"] * len(xs))
    clusters = cluster_along_heading(sf, np.arange(len(xs)), 0.0,
                                     RefineParams(min_cluster_points=5))
    assert len(clusters) == 1
    assert len(clusters[0].indices) == 6


def test_dominant_sensor_tie_resolves_to_smallest_id():
    xs = np.linspace(0.0, 0.1, 6)
    pts = np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], axis=1)
    sf = make_superframe(pts, np.full(6, 0.05), ["c", "b", "c", "b", "c", "b"])
    clusters = cluster_along_heading(sf, np.arange(6), 0.0, RefineParams())
    assert clusters[0].dominant_sensor == "b"


# ---------------------------------------------------------------------------
# speed compensation
# ---------------------------------------------------------------------------

def test_compensation_collapses_views_of_a_moving_object():
    # Surface point of an object moving at s along theta=0, seen at three
    # different times, must land on one spot at the reference time.
    s, t_star = 20.0, 0.05
    taus = np.array([0.0, 0.05, 0.1])
    base = np.array([4.0, 1.0, 0.5])
    pts = base + np.outer((taus - t_star) * s, [1.0, 0.0, 0.0])
    comp = speed_compensate(pts, taus, t_star, s, 0.0)
    assert_allclose(comp, np.tile(base, (3, 1)), atol=1e-12)


def test_compensation_shift_magnitude_worst_case():
    # 100 ms from the reference at 30 m/s displaces a point by 3 m.
    p = np.array([[12.0, -3.0, 0.7]])
    comp = speed_compensate(p, np.array([0.15]), 0.05, 30.0, 0.0)
    assert_allclose(np.abs(comp - p), [[3.0, 0.0, 0.0]], atol=1e-12)


def test_compensation_acts_along_heading():
    p = np.array([[0.0, 0.0, 0.0]])
    comp = speed_compensate(p, np.array([0.1]), 0.05, 30.0, np.pi / 2)
    assert_allclose(np.abs(comp), [[0.0, 1.5, 0.0]], atol=1e-12)
    assert comp[0, 1] == pytest.approx(-1.5)  # late point pulls back to t_star


def test_compensation_round_trip_is_exact():
    rng = np.random.default_rng(0)
    n = 2000
    pts = rng.uniform(-200.0, 200.0, (n, 3))
    taus = rng.uniform(0.0, 0.1, n)
    t_star, s, heading = 0.05, 27.0, rng.uniform(-np.pi, np.pi)
    comp = speed_compensate(pts, taus, t_star, s, heading)
    axis = np.array([np.cos(heading), np.sin(heading), 0.0])
    restored = comp + np.outer((taus - t_star) * s, axis)
    assert np.abs(restored - pts).max() < 1e-12


def test_zero_speed_compensation_is_identity():
    pts = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    comp = speed_compensate(pts, np.array([0.0, 0.1]), 0.05, 0.0, 1.0)
    assert_allclose(comp, pts)


# ---------------------------------------------------------------------------
# orientation anchoring
# ---------------------------------------------------------------------------

def lopsided_cloud(rng, dense_low=True):
    dense = rng.normal(0.0, 0.04, 300)
    tail = rng.uniform(0.3, 2.2, 60)
    coords = np.concatenate([dense, tail]) if dense_low else \
        np.concatenate([-dense, -tail]) + 2.2
    pts = np.zeros((len(coords), 3))
    pts[:, 0] = coords
    return pts, coords


def test_anchor_dense_mass_low_means_rear():
    rng = np.random.default_rng(5)
    pts, _ = lopsided_cloud(rng, dense_low=True)
    assert find_orientation_anchor(pts, 0.0, RefineParams()) == "rear"


def test_anchor_dense_mass_high_means_front():
    rng = np.random.default_rng(6)
    pts, _ = lopsided_cloud(rng, dense_low=False)
    assert find_orientation_anchor(pts, 0.0, RefineParams()) == "front"


def test_anchor_respects_heading_projection():
    # Same cloud, heading rotated by pi: rear and front swap.
    rng = np.random.default_rng(7)
    pts, _ = lopsided_cloud(rng, dense_low=True)
    assert find_orientation_anchor(pts, np.pi, RefineParams()) == "front"


def test_anchor_degenerate_cloud_ties_to_rear():
    pts = np.tile(np.array([3.0, 1.0, 0.2]), (8, 1))
    assert find_orientation_anchor(pts, 0.3, RefineParams()) == "rear"


def brute_mode(coords, n_grid=100_000):
    # Dense independent Parzen evaluation, chunked to bound memory.
    n = len(coords)
    sd = coords.std(ddof=1)
    iqr = np.subtract(*np.percentile(coords, [75, 25]))
    h = 0.9 * min(sd, iqr / 1.34) * n ** (-0.2)
    grid = np.linspace(coords.min(), coords.max(), n_grid)
    best_x, best_d = grid[0], -1.0
    for chunk in np.array_split(grid, 64):
        dens = np.exp(
            -0.5 * ((chunk[:, None] - coords[None, :]) / h) ** 2
        ).sum(axis=1)
        k = int(np.argmax(dens))
        if dens[k] > best_d:
            best_d, best_x = dens[k], chunk[k]
    return best_x


def test_anchor_agrees_with_dense_kde_oracle():
    rng = np.random.default_rng(11)
    for trial in range(12):
        pts, coords = lopsided_cloud(rng, dense_low=bool(trial % 2))
        mode_ref = brute_mode(coords)
        mean_ref = coords.mean()
        spacing = (coords.max() - coords.min()) / 511.0
        if abs(mode_ref - mean_ref) <= 2.0 * spacing:
            continue  # too close to call at the coarse grid's resolution
        expected = "rear" if mode_ref < mean_ref else "front"
        assert find_orientation_anchor(pts, 0.0, RefineParams()) == expected


# ---------------------------------------------------------------------------
# box anchoring
# ---------------------------------------------------------------------------

def test_anchor_box_rear_placement():
    box = AnnotatedBox(0.0, [10.0, 2.0, 0.75], [4.0, 2.0, 1.5], 0.0, "a")
    out = anchor_box(box, "rear", np.array([9.0, 9.4, 11.0]), RefineParams())
    # rear face at 9.0 - 0.05, center length/2 ahead of it
    assert_allclose(out.center, [8.95 + 2.0, 2.0, 0.75], atol=1e-12)
    assert_allclose(out.dims, box.dims)
    assert out.heading == box.heading
    assert out.t_star == box.t_star


def test_anchor_box_front_placement():
    box = AnnotatedBox(0.0, [10.0, -1.0, 0.5], [4.0, 2.0, 1.5], 0.0, "a")
    out = anchor_box(box, "front", np.array([9.0, 11.5]), RefineParams())
    assert_allclose(out.center, [11.55 - 2.0, -1.0, 0.5], atol=1e-12)


def test_anchor_box_rotated_heading():
    heading = np.pi / 2
    box = AnnotatedBox(0.0, [3.0, 10.0, 0.0], [4.0, 2.0, 1.0], heading, "a")
    coords = np.array([8.0, 9.0])  # projections onto +y
    out = anchor_box(box, "rear", coords, RefineParams())
    assert_allclose(out.center, [3.0, 7.95 + 2.0, 0.0], atol=1e-12)


def test_anchor_box_translation_equivariance():
    rng = np.random.default_rng(3)
    heading = 0.7
    box = AnnotatedBox(0.0, [5.0, -2.0, 0.3], [4.2, 1.8, 1.4], heading, "a")
    coords = rng.uniform(3.0, 6.0, 40)
    base = anchor_box(box, "rear", coords, RefineParams())
    shifted = anchor_box(box, "rear", coords + 2.5, RefineParams())
    axis = np.array([np.cos(heading), np.sin(heading), 0.0])
    assert_allclose(shifted.center, base.center + 2.5 * axis, atol=1e-12)


# ---------------------------------------------------------------------------
# pseudo boxes
# ---------------------------------------------------------------------------

def slab_scene(s=20.0, t_star=0.05, tau_a=0.025, tau_b=0.075):
    # Object: length 4, rear at x=8 at t_star, moving along +x at s.
    # Two sensors each see the rear face plus a short forward tail.
    rng = np.random.default_rng(42)

    def view(tau, sensor):
        rear_x = 8.0 + (tau - t_star) * s
        slab = np.stack([
            rear_x + rng.normal(0.0, 0.004, 30),
            rng.uniform(-0.9, 0.9, 30),
            rng.uniform(0.1, 1.4, 30),
        ], axis=1)
        tail = np.stack([
            rear_x + rng.uniform(0.05, 0.6, 8),
            rng.uniform(-0.9, -0.8, 8),
            rng.uniform(0.1, 1.4, 8),
        ], axis=1)
        pts = np.concatenate([slab, tail])
        return pts, np.full(len(pts), tau), [sensor] * len(pts)

    pa, ta, sa = view(tau_a, "a")
    pb, tb, sb = view(tau_b, "b")
    sf = make_superframe(np.concatenate([pa, pb]), np.concatenate([ta, tb]),
                         sa + sb, t_star=t_star)
    box = AnnotatedBox(t_star, [10.0, 0.0, 0.75], [4.0, 2.0, 1.5], 0.0, "obj")
    return sf, box


def test_pseudo_boxes_shift_back_onto_their_clusters():
    sf, box = slab_scene()
    params = RefineParams()
    roi = collect_roi_points(sf, box, 20.0, params)
    clusters = cluster_along_heading(sf, roi, box.heading, params)
    assert len(clusters) == 2
    pseudo = generate_pseudo_boxes(sf, box, clusters, 20.0, params)
    assert len(pseudo) == 2

    for pb, cluster in zip(pseudo, clusters):
        # each cluster's own raw points sit inside its pseudo box
        member_pts = sf.positions[cluster.indices]
        assert box_contains(pb.box, member_pts).all()
        assert pb.box.dims is not None
        assert_allclose(pb.box.dims, box.dims)
        assert pb.box.heading == box.heading
        expected_shift = (cluster.mean_tau - sf.t_star) * 20.0
        assert_allclose(pb.applied_shift, [expected_shift, 0.0, 0.0], atol=1e-12)

    # mean_tau offsets of -+0.025 s at 20 m/s give -+0.5 m shifts
    assert pseudo[0].applied_shift[0] == pytest.approx(-0.5, abs=1e-9)
    assert pseudo[1].applied_shift[0] == pytest.approx(0.5, abs=1e-9)
    assert pseudo[0].source_cluster == 0 and pseudo[1].source_cluster == 1

    # rear-anchored center lands near the true per-view center
    true_center_a = 10.0 + (0.025 - 0.05) * 20.0
    assert pseudo[0].box.center[0] == pytest.approx(true_center_a, abs=0.1)


def test_pseudo_box_count_matches_cluster_count():
    sf, box = slab_scene(tau_a=0.03, tau_b=0.07)
    params = RefineParams()
    roi = collect_roi_points(sf, box, 20.0, params)
    clusters = cluster_along_heading(sf, roi, box.heading, params)
    pseudo = generate_pseudo_boxes(sf, box, clusters, 20.0, params)
    assert len(pseudo) == len(clusters)


# ---------------------------------------------------------------------------
# track-level refinement
# ---------------------------------------------------------------------------

def track_and_superframes(speeds, dt=0.1, slab=True):
    boxes, frames = [], []
    for k, s in enumerate(speeds):
        t0 = k * dt
        t_star = t0 + dt / 2.0
        if slab:
            sf, box = slab_scene(s=s if abs(s) > 1e-9 else 20.0,
                                 t_star=t_star,
                                 tau_a=t0 + 0.025, tau_b=t0 + 0.075)
        else:
            pts = np.array([[500.0, 500.0, 0.0]])
            sf = make_superframe(pts, [t_star], ["a"], t_star=t_star)
            box = AnnotatedBox(t_star, [10.0, 0.0, 0.75], [4.0, 2.0, 1.5],
                               0.0, "obj")
        boxes.append(box)
        frames.append(sf)
    track = AnnotatedTrack("obj", tuple(boxes), dt)
    states = tuple(KinematicState(0.0, s) for s in speeds)
    estimate = StateEstimate(states, 0.0, True)
    return track, frames, estimate


def test_refinement_skipped_below_speed_threshold():
    track, frames, estimate = track_and_superframes([0.4, 0.4])
    out = refine_track(track, frames, estimate, RefineParams())
    assert len(out) == 2
    for pb, box in zip(out, track.boxes):
        assert pb.source_cluster == -1
        assert_allclose(pb.applied_shift, np.zeros(3))
        assert_allclose(pb.box.center, box.center)


def test_zero_clusters_fall_back_to_original_box():
    track, frames, estimate = track_and_superframes([20.0, 20.0], slab=False)
    out = refine_track(track, frames, estimate, RefineParams())
    assert len(out) == 2
    for pb, box in zip(out, track.boxes):
        assert pb.source_cluster == -1
        assert_allclose(pb.box.center, box.center)


def test_refinement_emits_boxes_per_cluster():
    track, frames, estimate = track_and_superframes([20.0, 20.0])
    out = refine_track(track, frames, estimate, RefineParams())
    assert len(out) == 4  # two clusters per frame
    stamps = sorted({round(pb.box.t_star, 9) for pb in out})
    assert stamps == pytest.approx([0.05, 0.15])


def test_refinement_requires_matching_superframes():
    track, frames, estimate = track_and_superframes([20.0, 20.0])
    with pytest.raises(AlignmentError):
        refine_track(track, frames[:1], estimate, RefineParams())


def test_refinement_requires_matching_estimate_length():
    track, frames, estimate = track_and_superframes([20.0, 20.0])
    short = StateEstimate(estimate.states[:1], 0.0, True)
    with pytest.raises(DataError):
        refine_track(track, frames, short, RefineParams())
