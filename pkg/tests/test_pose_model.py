from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlmlabel.errors import EmptyBBox, ValidationError
from vlmlabel.pose.model import (
    KEYPOINTS,
    REGIONS,
    AssignmentState,
    FrameObservation,
    Rect,
    RollingWindow,
    WindowEntry,
    compute_crop,
    region_boxes_from_assignment,
)

IMAGE = (2048, 1400)


def test_schema():
    assert list(REGIONS) == ["ears", "back", "paws", "tail"]
    assert len(KEYPOINTS) == 12 and len(set(KEYPOINTS)) == 12
    assert sum(len(v) for v in REGIONS.values()) == 12


def test_crop_padding_rule():
    # pad_x = 16 + 0.05 * 200 = 26, pad_y = 16 + 0.05 * 100 = 21
    assert compute_crop(Rect(100, 100, 300, 200), IMAGE) == Rect(74, 79, 326, 221)


def test_crop_clamped_at_corner():
    crop = compute_crop(Rect(0, 0, 50, 40), IMAGE)
    assert crop.x0 == 0 and crop.y0 == 0
    assert crop.x1 == pytest.approx(50 + 16 + 2.5) and crop.y1 == pytest.approx(40 + 16 + 2)


def test_crop_of_full_image_is_full_image():
    assert compute_crop(Rect(0, 0, *IMAGE), IMAGE) == Rect(0, 0, *IMAGE)


def test_empty_bbox():
    with pytest.raises(EmptyBBox):
        compute_crop(Rect(10, 10, 10, 50), IMAGE)
    with pytest.raises(EmptyBBox):
        compute_crop(Rect(3000, 10, 3100, 50), IMAGE)


@given(
    x0=st.floats(0, 2000),
    y0=st.floats(0, 1350),
    w=st.floats(1, 500),
    h=st.floats(1, 500),
)
def test_crop_contains_bbox_and_stays_in_image(x0, y0, w, h):
    box = Rect(x0, y0, min(x0 + w, IMAGE[0]), min(y0 + h, IMAGE[1]))
    crop = compute_crop(box, IMAGE)
    assert crop.contains_rect(box)
    assert Rect.image(IMAGE).contains_rect(crop)


def test_rect_helpers():
    r = Rect(0, 0, 10, 5)
    assert r.inside(np.array([[0, 0], [10, 5], [11, 1]])).tolist() == [True, True, False]
    assert r.translate(1, 2) == Rect(1, 2, 11, 7)
    assert r.pad(1) == Rect(-1, -1, 11, 6)
    assert Rect(-5, -5, 20, 3).clamp(r) == Rect(0, 0, 10, 3)
    assert Rect(20, 20, 30, 30).clamp(r).empty
    assert Rect.bounding(np.array([[1, 4], [3, 2]])) == Rect(1, 2, 3, 4)


def test_frame_observation_indices_in():
    obs = FrameObservation.build(0, "v", Rect(10, 10, 100, 100), np.array([[20, 20], [90, 90], [500, 500]]), IMAGE)
    assert obs.indices_in(Rect(0, 0, 50, 50)) == [0]
    assert obs.n_centroids == 3


def test_frame_observation_rejects_non_finite():
    with pytest.raises(ValidationError):
        FrameObservation.build(0, "v", Rect(10, 10, 100, 100), np.array([[np.nan, 1.0]]), IMAGE)


def test_assignment_state_check():
    st_ = AssignmentState.empty(0, ["a"])
    st_.set("a", "ear_L", 0, "seed")
    st_.set("a", "ear_R", 1, "seed")
    st_.check()
    st_.set("a", "tail_tip", 1, "seed")
    assert not st_.is_injective()
    with pytest.raises(ValidationError, match="twice"):
        st_.check()


def test_assignment_state_index_range():
    obs = FrameObservation.build(0, "a", Rect(10, 10, 100, 100), np.array([[20.0, 20.0]]), IMAGE)
    s = AssignmentState.empty(0, ["a"])
    s.set("a", "ear_L", 3, "seed")
    with pytest.raises(ValidationError, match="out of range"):
        s.check({"a": obs})


def test_assignment_state_incomplete():
    s = AssignmentState(0, {"a": {"ear_L": 0}})
    with pytest.raises(ValidationError, match="incomplete"):
        s.check()


def test_swap_and_owner():
    s = AssignmentState.empty(0, ["a"])
    s.set("a", "ear_L", 0, "seed")
    s.set("a", "ear_R", 1, "seed")
    s.swap("a", "ear_L", "ear_R", "stage-4")
    assert s.owner("a", 0) == "ear_R" and s.get("a", "ear_L") == 1
    assert s.provenance[("a", "ear_L")] == "stage-4"
    assert s.assigned_views("ear_L") == ["a"] and s.assigned_views("tail_tip") == []


def test_region_boxes_cover_assigned_centroids(small_sim):
    s = AssignmentState(0, {v: dict(m) for v, m in small_sim.truth[0].items()})
    boxes = region_boxes_from_assignment(s, small_sim.frames[0], 5.0)
    for view, obs in small_sim.frames[0].items():
        for region, kps in REGIONS.items():
            idx = [s.get(view, kp) for kp in kps]
            assert boxes[view][region].inside(obs.centroids[idx]).all()


def _entry(f):
    return WindowEntry(f, AssignmentState.empty(f, []), {}, {})


def test_rolling_window_discipline():
    w = RollingWindow([_entry(0), _entry(1), _entry(2)])
    w.append(_entry(3))
    assert w.frame_indices == [1, 2, 3] and len(w) == 3
    with pytest.raises(ValidationError):
        w.append(_entry(3))


def test_rolling_window_needs_three_seeds():
    with pytest.raises(ValidationError):
        RollingWindow([_entry(0), _entry(1)])
    with pytest.raises(ValidationError):
        RollingWindow([_entry(0), _entry(2), _entry(1)])
