import json
import math
import shutil
import subprocess
import sys

import numpy as np
import pytest

from annorefine import io
from annorefine.cli import main
from annorefine.geometry import RigidTransform
from annorefine.synth import AgentSpec, Profile, ScenarioConfig, SensorSpec


def small_config():
    mount_roof = RigidTransform(np.eye(3), np.array([0.0, 0.0, 2.0]))
    mount_nose = RigidTransform(np.eye(3), np.array([2.0, 0.0, 0.6]))
    return ScenarioConfig(
        duration=0.6,
        frame_rate=10.0,
        ego_speed_profile=Profile.constant(10.0),
        agents=(
            AgentSpec(
                track_id="lead",
                init_pos=(20.0, 0.0, 0.85),
                dims=(4.6, 1.9, 1.7),
                speed_profile=Profile.constant(18.0),
                heading_profile=Profile.constant(0.0),
            ),
        ),
        sensors=(
            SensorSpec("roof", mount_roof, 0.1, 0.0, rays_per_sweep=150),
            SensorSpec("nose", mount_nose, 0.1, math.pi, rays_per_sweep=150),
        ),
        annotation_noise_sigma=0.02,
        rng_seed=5,
        jitter_sigma=0.0,
    )


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> estimate -> refine -> eval, all through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "scene.json"
    cfg_path.write_text(
        json.dumps(io.scenario_config_to_dict(small_config())))
    bundle = root / "bundle"
    run = root / "run"
    assert main(["synth", "--config", str(cfg_path), "--out", str(bundle),
                 "--no-timestamp"]) == 0
    assert main(["estimate", str(bundle), "--out", str(run)]) == 0
    assert main(["refine", str(bundle), "--out", str(run)]) == 0
    assert main(["eval", str(bundle), "--out", str(run)]) == 0
    return {"root": root, "cfg": cfg_path, "bundle": bundle, "run": run}


def test_synth_writes_complete_bundle(pipeline):
    bundle = pipeline["bundle"]
    for name in ("poses.csv", "calib.json", "points.csv", "tracks.jsonl",
                 "gt.jsonl", "manifest.json"):
        assert (bundle / name).exists()
    manifest = json.loads((bundle / "manifest.json").read_text())
    assert manifest["n_frames"] == 6
    assert "created_at" not in manifest


def test_synth_default_config_gives_100_frames(tmp_path, capsys):
    out = tmp_path / "bundle"
    assert main(["synth", "--out", str(out), "--no-timestamp"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n_frames"] == 100
    assert "100 frames" in capsys.readouterr().out


def test_synth_rejects_unknown_key(tmp_path, capsys):
    cfg = io.scenario_config_to_dict(small_config())
    cfg["duratoin"] = 1.0
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    rc = main(["synth", "--config", str(path), "--out", str(tmp_path / "b")])
    assert rc == 2
    assert "duratoin" in capsys.readouterr().err


def test_synth_rejects_zero_duration(tmp_path, capsys):
    cfg = io.scenario_config_to_dict(small_config())
    cfg["duration"] = 0.0
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    rc = main(["synth", "--config", str(path), "--out", str(tmp_path / "b")])
    assert rc == 2
    assert "duration" in capsys.readouterr().err


def test_synth_same_seed_same_bytes(pipeline, tmp_path):
    again = tmp_path / "again"
    assert main(["synth", "--config", str(pipeline["cfg"]),
                 "--out", str(again), "--no-timestamp"]) == 0
    for name in ("poses.csv", "calib.json", "points.csv", "tracks.jsonl",
                 "gt.jsonl", "manifest.json"):
        assert (again / name).read_bytes() == \
            (pipeline["bundle"] / name).read_bytes(), name


def test_synth_seed_flag_changes_data(pipeline, tmp_path):
    other = tmp_path / "other"
    assert main(["synth", "--config", str(pipeline["cfg"]), "--seed", "99",
                 "--out", str(other), "--no-timestamp"]) == 0
    assert (other / "tracks.jsonl").read_bytes() != \
        (pipeline["bundle"] / "tracks.jsonl").read_bytes()


def test_compensate_writes_superframes(pipeline, tmp_path):
    out = tmp_path / "comp"
    assert main(["compensate", str(pipeline["bundle"]),
                 "--out", str(out)]) == 0
    lines = (out / "superframes.csv").read_text().splitlines()
    assert lines[0] == "x,y,z,timestamp,sensor_id,frame_id"
    n_points = sum(
        1 for line in (pipeline["bundle"] / "points.csv")
        .read_text().splitlines()[1:] if line)
    assert len(lines) - 1 == n_points


def test_estimate_row_count_and_plot(pipeline):
    run = pipeline["run"]
    rows = (run / "estimates.csv").read_text().splitlines()[1:]
    # 6 frames x 3 default methods
    assert len(rows) == 18
    methods = {line.split(",")[3] for line in rows}
    assert methods == {"mhe", "kf", "naive"}
    svg = run / "speed_lead.svg"
    assert svg.exists()
    assert b"<svg" in svg.read_bytes()[:200]


def test_estimate_single_method(pipeline, tmp_path):
    out = tmp_path / "naive"
    assert main(["estimate", str(pipeline["bundle"]), "--out", str(out),
                 "--method", "naive", "--no-plot"]) == 0
    rows = (out / "estimates.csv").read_text().splitlines()[1:]
    assert len(rows) == 6
    assert not list(out.glob("*.svg"))


def test_estimate_unknown_method_exits_2(pipeline, tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        main(["estimate", str(pipeline["bundle"]),
              "--out", str(tmp_path / "x"), "--method", "bogus"])
    assert excinfo.value.code == 2


def test_estimate_skips_degenerate_track(pipeline, tmp_path, caplog):
    bundle = tmp_path / "bundle"
    shutil.copytree(pipeline["bundle"], bundle)
    with open(bundle / "tracks.jsonl", "a", encoding="utf-8") as f:
        f.write(json.dumps({
            "track_id": "solo", "frame": 0, "t_star": 0.05,
            "center": [5.0, 0.0, 0.8], "dims": [4.0, 2.0, 1.5],
            "heading": 0.0}) + "\n")
    out = tmp_path / "run"
    with caplog.at_level("WARNING"):
        assert main(["estimate", str(bundle), "--out", str(out),
                     "--no-plot"]) == 0
    assert any("solo" in rec.message for rec in caplog.records)
    rows = (out / "estimates.csv").read_text().splitlines()[1:]
    assert all(row.endswith(",lead") for row in rows)


def test_refine_outputs_and_histogram(pipeline, capsys):
    run = pipeline["run"]
    assert main(["refine", str(pipeline["bundle"]), "--out", str(run)]) == 0
    out_text = capsys.readouterr().out
    assert "G histogram" in out_text
    refined = io.read_refined(run / "refined.jsonl")
    assert list(refined) == ["lead"]
    assert len(refined["lead"]) >= 6


def test_refine_misaligned_estimates_exit_2(pipeline, tmp_path, capsys):
    run = tmp_path / "run"
    run.mkdir()
    lines = (pipeline["run"] / "estimates.csv").read_text().splitlines()
    last_mhe = max(i for i, line in enumerate(lines) if ",mhe," in line)
    del lines[last_mhe]
    (run / "estimates.csv").write_text("\n".join(lines) + "\n")
    rc = main(["refine", str(pipeline["bundle"]), "--out", str(run)])
    assert rc == 2
    assert "align" in capsys.readouterr().err


def test_refine_missing_estimates_exit_3(pipeline, tmp_path):
    rc = main(["refine", str(pipeline["bundle"]),
               "--out", str(tmp_path / "empty")])
    assert rc == 3


def test_eval_metrics_cover_methods(pipeline):
    rows = (pipeline["run"] / "metrics.csv").read_text().splitlines()
    assert rows[0] == "track_id,metric,t,value"
    metrics = {line.split(",")[1] for line in rows[1:]}
    assert "mhe/speed_rmse" in metrics
    assert "naive/speed_rmse" in metrics
    assert "mhe/cluster_containment" in metrics
    # in-depth refinement scoring only for the selected method
    assert "naive/cluster_containment" not in metrics


def test_eval_without_gt_exits_2(pipeline, tmp_path, capsys):
    bundle = tmp_path / "bundle"
    shutil.copytree(pipeline["bundle"], bundle)
    (bundle / "gt.jsonl").unlink()
    rc = main(["eval", str(bundle), "--out", str(pipeline["run"])])
    assert rc == 2
    assert "gt.jsonl" in capsys.readouterr().err


def test_plot_rerenders_from_files(pipeline, tmp_path):
    out = tmp_path / "plots"
    assert main(["plot", str(pipeline["bundle"]),
                 "--estimates", str(pipeline["run"] / "estimates.csv"),
                 "--refined", str(pipeline["run"] / "refined.jsonl"),
                 "--out", str(out)]) == 0
    assert (out / "speed_lead.svg").exists()
    assert (out / "views_lead.svg").exists()


def test_estimate_rerun_is_byte_identical(pipeline, tmp_path):
    first = tmp_path / "a"
    second = tmp_path / "b"
    for out in (first, second):
        assert main(["estimate", str(pipeline["bundle"]),
                     "--out", str(out)]) == 0
    assert (first / "estimates.csv").read_bytes() == \
        (second / "estimates.csv").read_bytes()
    assert (first / "speed_lead.svg").read_bytes() == \
        (second / "speed_lead.svg").read_bytes()


def test_module_entry_point_help():
    proc = subprocess.run(
        [sys.executable, "-m", "annorefine", "--help"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "synth" in proc.stdout
    assert "refine" in proc.stdout
