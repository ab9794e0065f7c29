from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from vlmlabel.behavior.dec import DecModel, FeatureSequence
from vlmlabel.behavior.io import (
    append_caption,
    by_animal,
    load_features,
    load_model,
    load_segments,
    read_captions,
    save_features,
    save_model,
    save_segments,
)
from vlmlabel.behavior.segments import ClipSegment
from vlmlabel.behavior.semantics import ClipCaption
from vlmlabel.clients.oracle import OracleClient
from vlmlabel.config import BehaviorRunConfig, PoseRunConfig, apply_overrides, build, effective, load_config
from vlmlabel.errors import ConfigError, ValidationError
from vlmlabel.pose.io import (
    OUTPUT_FILES,
    RunWriter,
    load_seeds,
    read_assignment_table,
    read_frames,
    read_trajectories,
    read_truth,
    restore_window_entries,
    write_assignment_table,
    write_observations,
    write_truth,
)
from vlmlabel.pose.pipeline import PoseConfig, run_sequence

from conftest import seeds_of, truth_state

# -- config ----------------------------------------------------------------


def test_defaults():
    c = build(PoseRunConfig, {})
    assert c.thresholds.tau_reproj == 5.0 and c.thresholds.tau_qc == 10.0 and c.thresholds.radius == 40.0
    assert c.pipeline.max_retries == 2 and c.ablation == "full"


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as info:
        build(PoseRunConfig, {"pipeline": {"max_retires": 3}})
    assert info.value.key == "pipeline.max_retires"
    assert "pipeline.max_retires" in str(info.value)


@pytest.mark.parametrize(
    "doc, key",
    [
        ({"thresholds": {"tau_qc": "ten"}}, "thresholds.tau_qc"),
        ({"pipeline": {"workers": 2.5}}, "pipeline.workers"),
        ({"pipeline": {"strict_window": "yes"}}, "pipeline.strict_window"),
        ({"pipeline": {"workers": True}}, "pipeline.workers"),
        ({"client": {"corruption": 3}}, "client.corruption"),
        ({"calibration": 5}, "calibration"),
    ],
)
def test_type_errors_name_the_key(doc, key):
    with pytest.raises(ConfigError) as info:
        build(PoseRunConfig, doc)
    assert info.value.key == key


def test_optional_values_accept_null():
    c = build(PoseRunConfig, {"pipeline": {"max_frames": None}, "ransac": {"exhaustive": True}})
    assert c.pipeline.max_frames is None and c.ransac.exhaustive is True


def test_int_accepted_for_float():
    assert build(PoseRunConfig, {"thresholds": {"tau_qc": 7}}).thresholds.tau_qc == 7.0


def test_overrides():
    c = apply_overrides(build(PoseRunConfig, {}), {"pipeline.max_frames": 4, "ablation": "naive", "output": None})
    assert c.pipeline.max_frames == 4 and c.ablation == "naive" and c.output == "run"
    with pytest.raises(ConfigError, match="nope"):
        apply_overrides(c, {"pipeline.nope": 1})
    with pytest.raises(ConfigError, match="section"):
        apply_overrides(c, {"pipeline": 1})


def test_load_config_resolves_paths(tmp_path):
    path = tmp_path / "cfg" / "run.yaml"
    path.parent.mkdir()
    path.write_text("calibration: calib.json\noutput: /abs/out\nclient:\n  truth: truth\n")
    c = load_config(PoseRunConfig, path, {"inputs.seeds": "other.csv"})
    assert c.calibration == str(path.parent / "calib.json")
    assert c.output == "/abs/out"
    assert c.client.truth == str(path.parent / "truth")
    assert c.inputs.seeds == str(path.parent / "other.csv")
    assert c.inputs.images is None
    assert json.loads(json.dumps(effective(c)))["client"]["truth"] == c.client.truth


def test_json_config_and_parse_errors(tmp_path):
    good = tmp_path / "b.json"
    good.write_text(json.dumps({"dec": {"k": 4}}))
    assert load_config(BehaviorRunConfig, good).dec.k == 4
    bad = tmp_path / "bad.yaml"
    bad.write_text("dec: [unclosed\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(BehaviorRunConfig, bad)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(BehaviorRunConfig, tmp_path / "missing.yaml")
    top = tmp_path / "list.yaml"
    top.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(BehaviorRunConfig, top)


# -- pose io ---------------------------------------------------------------


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, small_sim, small_truth):
    d = tmp_path_factory.mktemp("pose")
    write_observations(d, small_sim.frames)
    write_truth(d / "truth", small_truth, small_sim.views)
    write_assignment_table(d / "seeds.csv", [truth_state(small_sim, f) for f in range(3)])
    return d


def test_observations_round_trip(dataset, small_sim, cams):
    frames = read_frames(dataset / "centroids.csv", dataset / "bboxes.csv", cams)
    assert sorted(frames) == list(range(len(small_sim.frames)))
    for f, obs in frames.items():
        for v, o in obs.items():
            ref = small_sim.frames[f][v]
            assert np.array_equal(o.centroids, ref.centroids)
            assert o.body_bbox == ref.body_bbox and o.crop == ref.crop


def test_seeds_round_trip(dataset, small_sim, cams):
    frames = read_frames(dataset / "centroids.csv", dataset / "bboxes.csv", cams)
    seeds = load_seeds(dataset / "seeds.csv", frames, list(cams))
    assert [s.frame_index for s, _ in seeds] == [0, 1, 2]
    assert seeds[1][0].views == small_sim.truth[1]


def test_truth_round_trip(dataset, small_sim, small_truth):
    truth = read_truth(dataset / "truth", small_sim.views)
    assert truth.assignments == small_truth.assignments
    for f in small_truth.points:
        assert np.array_equal(truth.points[f], small_truth.points[f])
        for v in small_sim.views:
            assert np.array_equal(truth.pixels[f][v], small_truth.pixels[f][v])


def test_missing_column_is_named(tmp_path, cams):
    (tmp_path / "c.csv").write_text("frame,view,index,x\n")
    (tmp_path / "b.csv").write_text("frame,view,x0,y0,x1,y1\n")
    with pytest.raises(ConfigError) as info:
        read_frames(tmp_path / "c.csv", tmp_path / "b.csv", cams)
    assert info.value.key == "y"


def test_duplicate_centroid_index_rejected(tmp_path, cams):
    (tmp_path / "c.csv").write_text("frame,view,index,x,y\n0,cam0,0,1,1\n0,cam0,0,2,2\n")
    (tmp_path / "b.csv").write_text("frame,view,x0,y0,x1,y1\n0,cam0,0,0,10,10\n")
    with pytest.raises(ValidationError, match="duplicate index"):
        read_frames(tmp_path / "c.csv", tmp_path / "b.csv", cams)


def test_unknown_keypoint_in_table(tmp_path):
    (tmp_path / "s.csv").write_text("frame,view,keypoint,index\n0,cam0,nose,1\n")
    with pytest.raises(ValidationError, match="nose"):
        read_assignment_table(tmp_path / "s.csv", ["cam0"])


def _results(small_sim, small_truth, cams, stop):
    return run_sequence(small_sim.frames[3:stop], seeds_of(small_sim), cams, PoseConfig(workers=1), OracleClient(small_truth))


def test_run_writer_outputs(tmp_path, small_sim, small_truth, cams):
    writer = RunWriter(tmp_path)
    results = _results(small_sim, small_truth, cams, 6)
    for r in results:
        writer.write(r, [r.frame_index])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest == {"version": 1, "completed": [3, 4, 5], "window": [5]}
    traj = read_trajectories(tmp_path / "trajectories.csv")
    assert sorted(traj) == [3, 4, 5] and len(traj[3]) == 12
    got = read_assignment_table(tmp_path / "assignments.csv", small_sim.views)
    assert got[4].views == small_sim.truth[4]
    assert got[4].provenance[("cam0", "ear_L")] == results[1].state.provenance[("cam0", "ear_L")]
    entries = restore_window_entries(tmp_path, dict(enumerate(small_sim.frames)), small_sim.views, [4, 5])
    assert [e.frame_index for e in entries] == [4, 5]
    assert entries[1].regions == results[2].regions


def test_run_writer_drops_unfinished_frames(tmp_path, small_sim, small_truth, cams):
    writer = RunWriter(tmp_path)
    results = _results(small_sim, small_truth, cams, 6)
    for r in results[:2]:
        writer.write(r, [])
    snapshot = {n: (tmp_path / n).read_text() for n in OUTPUT_FILES}
    # simulate a crash half way through frame 5
    with open(tmp_path / "assignments.csv", "a") as fh:
        fh.write("5,cam0,ear_L,3,stage-2,\n5,cam0,ear_R,")
    with open(tmp_path / "trajectories.csv", "a") as fh:
        fh.write("5,ear_L,1.0,2.0,3.0,0.1,cam0;cam1\n")
    resumed = RunWriter(tmp_path)
    assert resumed.resumed and resumed.completed == [3, 4]
    assert {n: (tmp_path / n).read_text() for n in OUTPUT_FILES} == snapshot


def test_run_writer_fresh_start_discards(tmp_path, small_sim, small_truth, cams):
    writer = RunWriter(tmp_path)
    writer.write(_results(small_sim, small_truth, cams, 4)[0], [])
    fresh = RunWriter(tmp_path, resume=False)
    assert not fresh.resumed
    assert (tmp_path / "trajectories.csv").read_text().count("\n") == 1


def test_resume_needs_outputs(tmp_path):
    RunWriter(tmp_path)
    Path(tmp_path / "qc.csv").unlink()
    with pytest.raises(ValidationError, match="missing"):
        RunWriter(tmp_path)


# -- behavior io -------------------------------------------------------------


def test_features_round_trip(tmp_path, rng):
    seqs = [FeatureSequence("A", 10.0, rng.normal(size=(20, 3))), FeatureSequence("B", 10.0, rng.normal(size=(20, 3)))]
    save_features(tmp_path / "f.npz", seqs)
    back = load_features(tmp_path / "f.npz")
    assert [s.animal for s in back] == ["A", "B"]
    assert all(np.array_equal(a.features, b.features) for a, b in zip(seqs, back))
    with pytest.raises(ConfigError):
        load_features(tmp_path / "missing.npz")


def test_segments_round_trip(tmp_path):
    segs = [ClipSegment("B", 0, 5, 1, 29.97, "B:0"), ClipSegment("A", 5, 9, 0, 30.0, "A:1"), ClipSegment("A", 0, 5, 2, 30.0, "A:0")]
    save_segments(tmp_path / "s.csv", segs)
    assert load_segments(tmp_path / "s.csv") == segs
    assert [s.clip_id for s in by_animal(segs)["A"]] == ["A:0", "A:1"]


def test_model_round_trip(tmp_path, rng):
    m = DecModel(rng.normal(size=(3, 2)), alpha=2.0, trace=[3.0, 2.5], seed=7, encoder=np.eye(2), reinits=1)
    save_model(tmp_path / "m.npz", m)
    back = load_model(tmp_path / "m.npz")
    assert np.array_equal(back.centroids, m.centroids)
    assert (back.alpha, back.trace, back.seed, back.reinits) == (2.0, [3.0, 2.5], 7, 1)
    assert np.array_equal(back.encoder, np.eye(2))


def test_captions_log_ignores_truncated_tail(tmp_path):
    path = tmp_path / "captions.jsonl"
    caps = [ClipCaption(ClipSegment("A", i * 10, i * 10 + 10, 0, 30.0, f"A:{i}"), "walk", "walks") for i in range(3)]
    for c in caps:
        append_caption(path, c)
    with open(path, "a") as fh:
        fh.write('{"animal": "A", "clip')
    assert read_captions(path) == caps
    assert read_captions(tmp_path / "none.jsonl") == []
    path.write_text("garbage\n" + path.read_text())
    with pytest.raises(ValidationError, match="corrupt line 1"):
        read_captions(path)
