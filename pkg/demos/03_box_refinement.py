"""Splitting one annotation into per-sensor pseudo boxes.

Three staggered LiDARs see a 25 m/s car at three different moments inside
each 100 ms frame, so the superframe holds three copies of its rear face,
spread over ~0.6 m. A single box cannot cover them all tightly. Refinement
clusters the views along the heading and emits one box per view, each
placed at its view's own sampling time.
"""

import numpy as np

from annorefine import (
    AgentSpec,
    EstimatorConfig,
    Profile,
    RigidTransform,
    ScenarioConfig,
    SensorSpec,
    boxes_to_world,
    corrupt_annotations,
    evaluate,
    generate_scenario,
    mhe_solve,
    project_to_path,
    refine_track,
)

mount = RigidTransform(np.eye(3), np.array([0.0, 0.0, 2.0]))
cfg = ScenarioConfig(
    duration=2.0,
    frame_rate=10.0,
    ego_speed_profile=Profile.constant(15.0),
    agents=(AgentSpec("lead", [25.0, 0.0, 0.85], [4.6, 1.9, 1.7],
                      Profile.constant(25.0), Profile.constant(0.0)),),
    sensors=tuple(
        SensorSpec(f"s{i}", mount, 0.1, -2.0 * np.pi * f)
        for i, f in enumerate((0.05, 0.30, 0.55))
    ),
    annotation_noise_sigma=0.02,
    jitter_sigma=0.008,
    rng_seed=3,
)
gt, _, superframes = generate_scenario(cfg)
track = corrupt_annotations(gt, cfg)[0]

series = project_to_path(boxes_to_world(track, gt.ego_traj))
estimate = mhe_solve(series, EstimatorConfig(Q=np.diag([1e-4, 1e-4]),
                                             Omega=0.09))
pseudo = refine_track(track, superframes, estimate)

report = evaluate(estimate, pseudo, gt, superframes=superframes,
                  annotations=track)

n_frames = len(track)
print(f"{n_frames} frames, {len(pseudo)} pseudo boxes "
      f"({len(pseudo) / n_frames:.1f} per frame)\n")
for name in ("speed_rmse", "pseudo_count_match",
             "cluster_containment_min", "union_coverage_min",
             "original_coverage_min"):
    if name in report.scalars:
        print(f"{name:>24}: {report.scalars[name]:.4f}")
print("\nthe single input box covers at best one view per frame "
      "(original_coverage_min); the per-view boxes cover every point of "
      "every view (union_coverage_min).")

k = 5
sf = superframes[k]
frame_pseudo = [pb for pb in pseudo
                if abs(pb.box.t_star - sf.t_star) < 1e-9]
labels = gt.point_labels[k] == "lead"
print(f"\nframe {k}: object points span x = "
      f"[{sf.positions[labels, 0].min():+.2f}, "
      f"{sf.positions[labels, 0].max():+.2f}] m in three view slabs")
for pb in frame_pseudo:
    lo = pb.box.center[0] - pb.box.dims[0] / 2.0
    hi = pb.box.center[0] + pb.box.dims[0] / 2.0
    print(f"  view {pb.source_cluster}: box spans "
          f"[{lo:+.2f}, {hi:+.2f}] m, shifted "
          f"{pb.applied_shift[0]:+.2f} m to its view's sampling time")
print("\nonly the observed rear face pins the box along the heading; "
      "which way the unseen body extends is read off the cloud's density "
      "profile, so on face-only views it can land on either side. every "
      "view stays inside its box either way.")
