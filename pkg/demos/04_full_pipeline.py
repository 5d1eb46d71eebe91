"""The whole pipeline through the command-line interface.

Generates a scenario bundle, estimates speeds, refines the boxes, and
scores everything against the bundled ground truth, all in a temporary
directory. The same flow works on the shell:

    annorefine synth --out bundle
    annorefine estimate bundle --out run
    annorefine refine bundle --out run
    annorefine eval bundle --out run
"""

import json
import tempfile
from pathlib import Path

from annorefine.cli import main

root = Path(tempfile.mkdtemp(prefix="annorefine_demo_"))
bundle = root / "bundle"
run = root / "run"

cfg = {
    "duration": 3.0,
    "frame_rate": 10.0,
    "ego_speed_profile": 15.0,
    "agents": [{
        "track_id": "lead",
        "init_pos": [25.0, 0.0, 0.85],
        "dims": [4.6, 1.9, 1.7],
        "speed_profile": 24.0,
        "heading_profile": 0.0,
    }],
    "sensors": [
        {"sensor_id": "roof",
         "mount": {"translation": [0.0, 0.0, 2.0],
                   "quaternion": [1.0, 0.0, 0.0, 0.0]},
         "sweep_period": 0.1, "azimuth_offset": -0.3},
        {"sensor_id": "nose",
         "mount": {"translation": [2.0, 0.0, 0.6],
                   "quaternion": [1.0, 0.0, 0.0, 0.0]},
         "sweep_period": 0.1, "azimuth_offset": -3.44159265},
    ],
    "annotation_noise_sigma": 0.05,
    "rng_seed": 1,
}
cfg_path = root / "scene.json"
cfg_path.write_text(json.dumps(cfg, indent=2))

for argv in (
    ["synth", "--config", str(cfg_path), "--out", str(bundle)],
    ["estimate", str(bundle), "--out", str(run)],
    ["refine", str(bundle), "--out", str(run)],
    ["eval", str(bundle), "--out", str(run)],
):
    print(f"$ annorefine {' '.join(argv)}")
    rc = main(argv)
    assert rc == 0, f"exit code {rc}"
    print()

print("outputs:")
for path in sorted(root.rglob("*")):
    if path.is_file():
        print(f"  {path.relative_to(root)}  ({path.stat().st_size} bytes)")

print("\nfirst metric rows:")
for line in (run / "metrics.csv").read_text().splitlines()[:8]:
    print(f"  {line}")
