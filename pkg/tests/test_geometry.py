from __future__ import annotations

import json

import numpy as np
import pytest

from vlmlabel.errors import ConfigError, DegenerateDepth, DegenerateGeometry, InsufficientViews
from vlmlabel.geometry import (
    CameraModel,
    dump_calibration,
    load_calibration,
    parse_calibration,
    project,
    project_many,
    reprojection_error,
    triangulate_dlt,
)


def simple_camera(name="c", t=(0.0, 0.0, 0.0), f=1000.0, c=(500.0, 400.0)):
    K = np.array([[f, 0, c[0]], [0, f, c[1]], [0, 0, 1.0]])
    return CameraModel(name, K, np.eye(3), np.array(t, dtype=float), (1000, 800))


def test_project_matches_hand_computed_pinhole():
    cam = simple_camera()
    # u = f * X/Z + cx, v = f * Y/Z + cy
    uv = project(cam, [100.0, -50.0, 2000.0])
    assert uv == pytest.approx([500.0 + 1000 * 0.05, 400.0 - 1000 * 0.025])


def test_project_on_principal_axis_hits_principal_point():
    assert project(simple_camera(), [0, 0, 1234.0]) == pytest.approx([500.0, 400.0])


def test_project_behind_camera_raises():
    with pytest.raises(DegenerateDepth):
        project(simple_camera(), [0.0, 0.0, -10.0])
    with pytest.raises(DegenerateDepth):
        project(simple_camera(), [5.0, 5.0, 0.0])


def test_project_many_marks_bad_depth_rows_nan():
    out = project_many(simple_camera(), np.array([[0, 0, 1000.0], [0, 0, -1.0]]))
    assert out[0] == pytest.approx([500, 400])
    assert np.isnan(out[1]).all()


def test_reprojection_error_is_pixel_distance():
    cam = simple_camera()
    assert reprojection_error(cam, [0, 0, 1000.0], [503.0, 404.0]) == pytest.approx(5.0)


def test_two_view_triangulation_recovers_point():
    a = simple_camera("a")
    b = simple_camera("b", t=(-200.0, 0.0, 0.0))
    X = np.array([30.0, -20.0, 1500.0])
    got = triangulate_dlt([(a, project(a, X)), (b, project(b, X))])
    assert got == pytest.approx(X, abs=1e-8)


def test_triangulation_exact_on_rig(rig, rng):
    pts = rng.uniform([-100, -100, 0], [100, 100, 60], size=(50, 3))
    for X in pts:
        got = triangulate_dlt([(c, project(c, X)) for c in rig])
        assert np.linalg.norm(got - X) < 1e-7


def test_triangulation_needs_two_views(rig):
    with pytest.raises(InsufficientViews):
        triangulate_dlt([(rig[0], [100.0, 100.0])])


def test_identical_cameras_are_rank_deficient():
    a = simple_camera("a")
    b = simple_camera("b")
    uv = project(a, [0, 0, 1000.0])
    with pytest.raises(DegenerateGeometry):
        triangulate_dlt([(a, uv), (b, uv)])


def test_camera_rejects_non_orthonormal_rotation():
    with pytest.raises(ConfigError) as info:
        CameraModel("x", np.eye(3), 2 * np.eye(3), np.zeros(3), (10, 10))
    assert info.value.key == "rotation"


def test_camera_rejects_reflection():
    with pytest.raises(ConfigError):
        CameraModel("x", np.eye(3), np.diag([1.0, 1.0, -1.0]), np.zeros(3), (10, 10))


def test_camera_center(rig):
    for cam in rig:
        assert cam.rotation @ cam.center + cam.translation == pytest.approx(np.zeros(3), abs=1e-9)


@pytest.mark.parametrize("suffix", [".json", ".yaml"])
def test_calibration_round_trip(tmp_path, rig, suffix):
    path = tmp_path / f"calib{suffix}"
    dump_calibration(rig, path)
    loaded = load_calibration(path)
    assert [c.name for c in loaded] == [c.name for c in rig]
    for a, b in zip(loaded, rig):
        assert np.array_equal(a.projection, b.projection)
        assert a.image_size == b.image_size


def _doc(rig):
    return {"units": "mm", "cameras": [c.to_dict() for c in rig[:2]]}


@pytest.mark.parametrize("missing", ["intrinsics", "rotation", "translation", "image_size", "name"])
def test_missing_camera_key_is_named(rig, missing):
    doc = _doc(rig)
    del doc["cameras"][0][missing]
    with pytest.raises(ConfigError) as info:
        parse_calibration(doc)
    assert info.value.key == missing
    assert missing in str(info.value)


def test_distortion_is_rejected(rig):
    doc = _doc(rig)
    doc["cameras"][1]["distortion"] = [0.1, 0, 0, 0, 0]
    with pytest.raises(ConfigError, match="distortion"):
        parse_calibration(doc)


def test_units_must_be_mm(rig):
    doc = _doc(rig)
    doc["units"] = "m"
    with pytest.raises(ConfigError) as info:
        parse_calibration(doc)
    assert info.value.key == "units"


def test_unknown_top_level_key(rig):
    doc = _doc(rig)
    doc["extra"] = 1
    with pytest.raises(ConfigError, match="extra"):
        parse_calibration(doc)


def test_duplicate_camera_names(rig):
    doc = _doc(rig)
    doc["cameras"][1]["name"] = doc["cameras"][0]["name"]
    with pytest.raises(ConfigError, match="duplicate"):
        parse_calibration(doc)


def test_unparseable_calibration_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_calibration(path)
    with pytest.raises(ConfigError):
        load_calibration(tmp_path / "absent.json")


def test_calibration_json_is_plain(tmp_path, rig):
    path = tmp_path / "c.json"
    dump_calibration(rig, path)
    doc = json.loads(path.read_text())
    assert doc["units"] == "mm" and len(doc["cameras"]) == 6
