from __future__ import annotations

import numpy as np
import pytest

from vlmlabel.behavior.segments import check_partition
from vlmlabel.geometry import project
from vlmlabel.pose.model import KEYPOINTS
from vlmlabel.synth import (
    IMAGE_SIZE,
    SKELETON,
    bone_lengths,
    generate_feature_session,
    generate_rig,
    generate_skeleton_trajectory,
    plant_segments,
    render_observations,
)


@pytest.fixture(scope="module")
def traj():
    return generate_skeleton_trajectory(200, seed=1)


def test_bone_lengths_are_exact(traj):
    for kp, length in bone_lengths().items():
        parent = SKELETON[kp][0]
        d = np.linalg.norm(traj[:, KEYPOINTS.index(kp)] - traj[:, KEYPOINTS.index(parent)], axis=1)
        assert np.allclose(d, length, atol=1e-9)


def test_velocity_cap(traj):
    assert np.linalg.norm(np.diff(traj, axis=0), axis=2).max() <= 6.0 + 1e-9


def test_trajectory_stays_in_arena(traj):
    assert np.abs(traj[..., :2]).max() < 250
    assert traj.shape == (200, 12, 3)


def test_trajectory_is_deterministic():
    assert np.array_equal(generate_skeleton_trajectory(20, seed=4), generate_skeleton_trajectory(20, seed=4))
    assert not np.array_equal(generate_skeleton_trajectory(20, seed=4), generate_skeleton_trajectory(20, seed=5))
    with pytest.raises(ValueError):
        generate_skeleton_trajectory(0)


def test_rig_rotations_are_orthonormal(rig):
    assert len(rig) == 6
    for cam in rig:
        assert cam.rotation @ cam.rotation.T == pytest.approx(np.eye(3), abs=1e-12)
        assert np.linalg.det(cam.rotation) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        generate_rig(1)


def test_projections_fall_inside_images(rig, traj):
    for cam in rig:
        for X in traj[::10].reshape(-1, 3):
            u, v = project(cam, X)
            assert 0 <= u < IMAGE_SIZE[0] and 0 <= v < IMAGE_SIZE[1]


def test_noise_free_render_is_exact(rig, traj):
    sim = render_observations(traj[:5], rig, noise=0.0, seed=0)
    for f in range(5):
        for j, cam in enumerate(rig):
            obs = sim.frames[f][cam.name]
            for kp, idx in sim.truth[f][cam.name].items():
                assert np.array_equal(obs.centroids[idx], sim.pixels[f, j, KEYPOINTS.index(kp)])
                assert obs.centroids[idx] == pytest.approx(project(cam, traj[f, KEYPOINTS.index(kp)]), abs=1e-9)


def test_render_noise_level(rig, traj):
    sim = render_observations(traj, rig, noise=2.0, seed=0)
    res = []
    for f in range(len(traj)):
        for j, cam in enumerate(rig):
            obs = sim.frames[f][cam.name]
            for kp, idx in sim.truth[f][cam.name].items():
                res.append(obs.centroids[idx] - sim.pixels[f, j, KEYPOINTS.index(kp)])
    assert np.std(res) == pytest.approx(2.0, rel=0.05)


def test_full_occlusion_gives_empty_frames(rig, traj):
    sim = render_observations(traj[:3], rig, occlusion=1.0, seed=0)
    for f in range(3):
        for v, obs in sim.frames[f].items():
            assert obs.n_centroids == 0
            assert all(i is None for i in sim.truth[f][v].values())


def test_partial_occlusion_rate(rig, traj):
    sim = render_observations(traj, rig, occlusion=0.25, seed=2)
    hidden = [i is None for t in sim.truth for m in t.values() for i in m.values()]
    assert np.mean(hidden) == pytest.approx(0.25, abs=0.03)


def test_centroid_order_is_shuffled(rig, traj):
    sim = render_observations(traj[:10], rig, seed=0)
    orders = {tuple(m[kp] for kp in KEYPOINTS) for t in sim.truth for m in t.values()}
    assert len(orders) > 1


def test_body_bbox_contains_centroids(rig, traj):
    sim = render_observations(traj[:10], rig, noise=1.0, seed=0)
    for t in sim.frames:
        for obs in t.values():
            assert obs.body_bbox.inside(obs.centroids).all()
            assert obs.crop.contains_rect(obs.body_bbox)


def test_planted_segments_partition_and_alternate():
    planted = plant_segments(["A", "B"], 500, 4, 10.0, seed=1)
    for animal in ("A", "B"):
        segs = [s for s in planted if s.animal == animal]
        check_partition(segs, 500)
        assert all(a.cluster != b.cluster for a, b in zip(segs, segs[1:]))
        assert all(s.n_frames >= 10 for s in segs)
        assert all(s.n_frames <= 60 for s in segs[:-1])


def test_feature_session_follows_plan():
    seqs, planted = generate_feature_session(animals=("A",), n_frames=300, noise=0.0, seed=3, dim=4)
    X = seqs[0].features
    for s in planted:
        block = X[s.start : s.end]
        assert np.all(block == block[0])
    assert seqs[0].n_frames == 300 and X.shape[1] == 4
