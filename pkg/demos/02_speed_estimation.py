"""Recovering object speed from noisy box annotations.

A car moves at a constant 20 m/s. Its annotations carry 0.2 m of center
noise plus the view-dependent bias that multi-sensor annotation produces.
Differencing consecutive positions (the naive estimate) amplifies that
noise by 1/dt; the batch estimator suppresses it by fusing all frames
under a constant-acceleration motion model.
"""

import numpy as np

from annorefine import (
    EstimatorConfig,
    kf_filter,
    make_noisy_track,
    mhe_solve,
    naive_speed,
    project_to_path,
    rts_smooth,
)

track, d_true, s_true = make_noisy_track(
    n=100, speed=20.0, sigma=0.2, view_bias=True, seed=42)
series = project_to_path(track)

config = EstimatorConfig(Q=np.diag([1e-4, 1e-4]), Omega=0.09)


def speeds(estimate):
    return np.array([st.s for st in estimate.states])


candidates = {
    "naive diff": naive_speed(series),
    "kalman filter": speeds(kf_filter(series, config)),
    "rts smoother": speeds(rts_smooth(series, config)),
    "batch mhe": speeds(mhe_solve(series, config)),
}

print(f"true speed 20 m/s over {len(series)} frames, "
      "0.2 m noise + view bias\n")
print(f"{'method':>14} {'rmse [m/s]':>11} {'total variation':>16}")
for name, s in candidates.items():
    rmse = np.sqrt(np.mean((s - s_true) ** 2))
    tv = np.abs(np.diff(s)).sum()
    print(f"{name:>14} {rmse:>11.3f} {tv:>16.2f}")

# a single bad annotation: shift one box 1.5 m along the heading
from dataclasses import replace

boxes = list(track.boxes)
box = boxes[50]
boxes[50] = replace(box, center=box.center + 1.5 * box.heading_axis())
bumped = replace(track, boxes=tuple(boxes))
bumped_series = project_to_path(bumped)

spike = np.abs(naive_speed(bumped_series) - 20.0).max()
dev = np.abs(speeds(mhe_solve(bumped_series, config)) - 20.0).max()
print(f"\nwith one box displaced 1.5 m: naive spikes {spike:.1f} m/s "
      f"off truth, the batch estimate stays within {dev:.2f} m/s")
