from __future__ import annotations

import csv
import json

import pytest
import yaml
from click.testing import CliRunner

from vlmlabel.cli import main
from vlmlabel.pose.io import OUTPUT_FILES


def invoke(*args):
    result = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    return result


@pytest.fixture(scope="module")
def rig_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("rig")
    res = invoke("simulate", "rig", d, "--frames", 15, "--seed", 2, "--p-swap", 0.15, "--p-swap-global", 0.05)
    assert res.exit_code == 0, res.output
    return d


def _edit_config(d, **changes):
    doc = yaml.safe_load((d / "config.yaml").read_text())
    for dotted, value in changes.items():
        node = doc
        *parents, last = dotted.split("__")
        for p in parents:
            node = node.setdefault(p, {})
        node[last] = value
    path = d / "edited.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def _mean_error(run):
    with open(run / "report_pose.csv") as fh:
        rows = {r["keypoint"]: r for r in csv.DictReader(fh)}
    return float(rows["all"]["mean_3d_error_mm"])


def test_smoke_run_and_report(rig_dir, tmp_path):
    out = tmp_path / "full"
    res = invoke("pose", "run", "--config", rig_dir / "config.yaml", "--output", out)
    assert res.exit_code == 0, res.output
    assert "15 frames labeled" in res.output
    for name in OUTPUT_FILES + ("manifest.json", "config.effective.json"):
        assert (out / name).exists()
    rep = invoke("report", "pose", out, "--truth", rig_dir / "truth")
    assert rep.exit_code == 0
    assert "mean_3d_error_mm" in rep.output and "all" in rep.output
    assert _mean_error(out) < 5.0


def test_naive_is_worse_than_full(rig_dir, tmp_path):
    errs = {}
    for ablation in ("full", "naive"):
        out = tmp_path / ablation
        assert invoke("pose", "run", "--config", rig_dir / "config.yaml", "--ablation", ablation, "--output", out).exit_code == 0
        assert invoke("report", "pose", out, "--truth", rig_dir / "truth").exit_code == 0
        errs[ablation] = _mean_error(out)
    assert errs["naive"] > errs["full"]


def test_resume_matches_uninterrupted(rig_dir, tmp_path):
    whole, parts = tmp_path / "whole", tmp_path / "parts"
    assert invoke("pose", "run", "--config", rig_dir / "config.yaml", "--output", whole).exit_code == 0
    first = invoke("pose", "run", "--config", rig_dir / "config.yaml", "--output", parts, "--max-frames", 6)
    assert "6 frames labeled" in first.output
    second = invoke("pose", "run", "--config", rig_dir / "config.yaml", "--output", parts)
    assert "9 frames labeled" in second.output
    for name in OUTPUT_FILES + ("manifest.json",):
        assert (whole / name).read_bytes() == (parts / name).read_bytes(), name


def test_changed_settings_refuse_to_resume(rig_dir, tmp_path):
    out = tmp_path / "run"
    assert invoke("pose", "run", "--config", rig_dir / "config.yaml", "--output", out, "--max-frames", 2).exit_code == 0
    res = invoke("pose", "run", "--config", rig_dir / "config.yaml", "--output", out, "--ablation", "naive")
    assert res.exit_code == 1
    fresh = invoke("pose", "run", "--config", rig_dir / "config.yaml", "--output", out, "--ablation", "naive", "--fresh")
    assert fresh.exit_code == 0


def test_missing_calibration_key_exits_with_key_name(rig_dir, tmp_path):
    doc = json.loads((rig_dir / "calibration.json").read_text())
    del doc["cameras"][2]["intrinsics"]
    (tmp_path / "calib.json").write_text(json.dumps(doc))
    config = _edit_config(rig_dir, calibration=str(tmp_path / "calib.json"), output=str(tmp_path / "out"))
    res = invoke("pose", "run", "--config", config)
    assert res.exit_code == 1
    assert "intrinsics" in res.output


def test_unknown_config_key_exits_1(rig_dir, tmp_path):
    config = _edit_config(rig_dir, pipeline__max_retires=3, output=str(tmp_path / "out"))
    res = invoke("pose", "run", "--config", config)
    assert res.exit_code == 1 and "pipeline.max_retires" in res.output


def test_invalid_seed_exits_2(rig_dir, tmp_path):
    rows = (rig_dir / "seeds.csv").read_text().splitlines()
    header, body = rows[0], rows[1:]
    # give ear_R of the first view the same centroid as ear_L
    ear_l = next(r for r in body if ",ear_L," in r).rsplit(",", 1)[1]
    body = [r.rsplit(",", 1)[0] + "," + ear_l if r.startswith("1,cam0,ear_R,") else r for r in body]
    (tmp_path / "seeds.csv").write_text("\n".join([header, *body]) + "\n")
    config = _edit_config(rig_dir, inputs__seeds=str(tmp_path / "seeds.csv"), output=str(tmp_path / "out"))
    res = invoke("pose", "run", "--config", config)
    assert res.exit_code == 2
    assert "validation error" in res.output


def test_unavailable_client_exits_3(rig_dir, tmp_path):
    config = _edit_config(
        rig_dir, client__kind="unavailable", pipeline__max_consecutive_unavailable=2, output=str(tmp_path / "out")
    )
    res = invoke("pose", "run", "--config", config)
    assert res.exit_code == 3
    assert "client unavailable" in res.output


def test_qc_requalify(rig_dir, tmp_path):
    out = tmp_path / "run"
    assert invoke("pose", "run", "--config", rig_dir / "config.yaml", "--output", out).exit_code == 0
    loose = invoke("pose", "qc", out, "--tau", 1000)
    strict = invoke("pose", "qc", out, "--tau", 0.01)
    assert loose.exit_code == strict.exit_code == 0
    n_loose = int(loose.output.split("/")[0])
    n_strict = int(strict.output.split("/")[0])
    assert n_loose < n_strict
    assert (out / "review.csv").exists()


def test_qc_requalify_keeps_motion_flags(rig_dir, tmp_path):
    out = tmp_path / "run"
    assert invoke("pose", "run", "--config", rig_dir / "config.yaml", "--output", out, "--max-frames", 4).exit_code == 0
    lines = (out / "qc.csv").read_text().splitlines()
    # mark one accepted keypoint as a motion jump, as the run would have
    i = next(i for i, line in enumerate(lines) if line.endswith(",accept,"))
    frame, kp = lines[i].split(",")[:2]
    lines[i] = f"{frame},{kp},flag,jump:40.0mm"
    (out / "qc.csv").write_text("\n".join(lines) + "\n")
    res = invoke("pose", "qc", out, "--tau", 1000)
    assert res.exit_code == 0
    rows = list(csv.DictReader((out / "review.csv").open()))
    assert [(r["frame"], r["keypoint"], r["reason"]) for r in rows] == [(frame, kp, "jump:40.0mm")]


def test_behavior_pipeline(tmp_path):
    d = tmp_path / "session"
    assert invoke("simulate", "session", d, "--animals", 2, "--frames", 600, "--seed", 1).exit_code == 0
    config = d / "config.yaml"
    cl = invoke("behavior", "cluster", "--config", config, "--k", 4)
    assert cl.exit_code == 0, cl.output
    cap = invoke("behavior", "caption", "--config", config)
    assert cap.exit_code == 0 and "(0 uncaptioned)" in cap.output
    mg = invoke("behavior", "merge", "--config", config)
    assert mg.exit_code == 0
    ex = invoke("behavior", "export", "--config", config)
    assert ex.exit_code == 0
    out = yaml.safe_load(config.read_text())["output"]
    timeline = d / out / "timeline.json"
    assert (d / out / "timeline.csv").exists()
    rep = invoke("report", "behavior", timeline)
    assert rep.exit_code == 0 and "A0" in rep.output


def test_help_lists_commands():
    res = invoke("--help")
    for name in ("simulate", "pose", "behavior", "report"):
        assert name in res.output
