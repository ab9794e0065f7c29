"""Ground-truth generators for desk-scale verification.

Everything here is reproducible bit for bit from its arguments and seed. The
pose side produces a mouse-proportioned 12-keypoint skeleton moving in an
arena, a ring of calibrated cameras around it, and identity-free centroid
observations with hidden ground truth. The behavior side produces feature
sequences with planted segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .behavior.dec import FeatureSequence
from .behavior.segments import ClipSegment
from .geometry import CameraModel, project_many
from .pose.model import KEYPOINTS, FrameObservation, Rect

# (parent, direction in body frame: x forward, y left, z up, length mm)
SKELETON: dict[str, tuple[str | None, tuple[float, float, float], float]] = {
    "back_middle": (None, (0.0, 0.0, 0.0), 0.0),
    "back_top": ("back_middle", (1.0, 0.0, 0.15), 25.0),
    "back_bottom": ("back_middle", (-1.0, 0.0, -0.05), 25.0),
    "ear_L": ("back_top", (0.55, 0.65, 0.5), 18.0),
    "ear_R": ("back_top", (0.55, -0.65, 0.5), 18.0),
    "forepaw_L": ("back_top", (0.25, 0.45, -1.0), 30.0),
    "forepaw_R": ("back_top", (0.25, -0.45, -1.0), 30.0),
    "hindpaw_L": ("back_bottom", (0.0, 0.5, -1.0), 30.0),
    "hindpaw_R": ("back_bottom", (0.0, -0.5, -1.0), 30.0),
    "tail_base": ("back_bottom", (-1.0, 0.0, -0.3), 18.0),
    "tail_middle": ("tail_base", (-1.0, 0.0, 0.0), 35.0),
    "tail_tip": ("tail_middle", (-1.0, 0.0, 0.0), 35.0),
}
# joint swing amplitude (rad) per bone
SWING = {
    "back_top": 0.15,
    "back_bottom": 0.15,
    "ear_L": 0.15,
    "ear_R": 0.15,
    "forepaw_L": 0.35,
    "forepaw_R": 0.35,
    "hindpaw_L": 0.3,
    "hindpaw_R": 0.3,
    "tail_base": 0.25,
    "tail_middle": 0.45,
    "tail_tip": 0.6,
}
BODY_HEIGHT_MM = 28.0
IMAGE_SIZE = (2048, 1400)


def bone_lengths() -> dict[str, float]:
    return {kp: length for kp, (parent, _, length) in SKELETON.items() if parent is not None}


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _rot_z(a: np.ndarray) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def _rot_y(a: np.ndarray) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


class _Smooth:
    """Band-limited signal: a sum of low-frequency sinusoids with random phases."""

    def __init__(self, rng: np.random.Generator, n: int = 4, fmax: float = 0.5, amplitude: float = 1.0):
        self.freq = rng.uniform(0.05, fmax, size=n)
        self.phase = rng.uniform(0, 2 * np.pi, size=n)
        w = rng.uniform(0.5, 1.0, size=n)
        self.amp = amplitude * w / w.sum()

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return (self.amp * np.sin(2 * np.pi * self.freq * t[:, None] + self.phase)).sum(axis=1)


def generate_skeleton_trajectory(
    frames: int,
    seed: int = 0,
    arena_radius: float = 120.0,
    max_step: float = 6.0,
    fps: float = 30.0,
) -> np.ndarray:
    """Smooth articulated trajectory, ``(frames, 12, 3)`` in mm, keypoints in schema order.

    Bone lengths are exact. The time base is slowed until no keypoint moves
    more than ``max_step`` mm between consecutive frames.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    rng = np.random.default_rng(seed)
    px = _Smooth(rng, amplitude=arena_radius * 0.7)
    py = _Smooth(rng, amplitude=arena_radius * 0.7)
    heading = _Smooth(rng, amplitude=np.pi)
    bob = _Smooth(rng, amplitude=3.0)
    swings = {kp: (_Smooth(rng, fmax=1.0, amplitude=a), _Smooth(rng, fmax=1.0, amplitude=a * 0.5)) for kp, a in SWING.items()}

    def pose(t: np.ndarray) -> np.ndarray:
        root = np.stack([px(t), py(t), BODY_HEIGHT_MM + bob(t)], axis=1)
        Rb = _rot_z(heading(t))
        out: dict[str, np.ndarray] = {"back_middle": root}
        for kp, (parent, direction, length) in SKELETON.items():
            if parent is None:
                continue
            yaw, pitch = swings[kp][0](t), swings[kp][1](t)
            d = _unit(np.asarray(direction, dtype=np.float64))
            local = np.einsum("tij,tjk,k->ti", _rot_z(yaw), _rot_y(pitch), d)
            out[kp] = out[parent] + length * np.einsum("tij,tj->ti", Rb, local)
        return np.stack([out[kp] for kp in KEYPOINTS], axis=1)

    dt = 1.0 / fps
    for _ in range(60):
        traj = pose(np.arange(frames) * dt)
        if frames == 1:
            break
        step = np.linalg.norm(np.diff(traj, axis=0), axis=2).max()
        if step <= max_step:
            break
        dt *= 0.9 * max_step / step
    return traj


def look_at(center: np.ndarray, target: np.ndarray, up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> np.ndarray:
    """World-to-camera rotation with the optical axis toward ``target`` and image y pointing down."""
    z = _unit(target - center)
    down = -up - np.dot(-up, z) * z
    y = _unit(down)
    x = np.cross(y, z)
    return np.stack([x, y, z])


def generate_rig(
    n_cameras: int = 6,
    arena_radius: float = 150.0,
    seed: int = 0,
    distance: float = 700.0,
    height: float = 450.0,
    focal: float = 1600.0,
    image_size: tuple[int, int] = IMAGE_SIZE,
) -> list[CameraModel]:
    """Cameras evenly ringed around the arena, all aimed near its center."""
    if n_cameras < 2:
        raise ValueError("need at least 2 cameras")
    rng = np.random.default_rng(seed)
    w, h = image_size
    cams = []
    for i in range(n_cameras):
        az = 2 * np.pi * i / n_cameras + rng.uniform(-0.1, 0.1)
        C = np.array([distance * np.cos(az), distance * np.sin(az), height + rng.uniform(-30, 30)])
        target = np.array([rng.uniform(-10, 10), rng.uniform(-10, 10), 20.0])
        R = look_at(C, target)
        f = focal * rng.uniform(0.97, 1.03)
        K = np.array([[f, 0.0, w / 2 + rng.uniform(-8, 8)], [0.0, f, h / 2 + rng.uniform(-8, 8)], [0, 0, 1.0]])
        cams.append(CameraModel(f"cam{i}", K, R, -R @ C, image_size))
    return cams


@dataclass
class SimObservations:
    """Rendered centroid stream plus the hidden ground truth.

    ``truth[f][view][keypoint]`` is the centroid index of that keypoint, or
    ``None`` when it is occluded. ``pixels`` holds exact projections,
    ``(frames, views, 12, 2)``.
    """

    frames: list[dict[str, FrameObservation]]
    truth: list[dict[str, dict[str, int | None]]]
    pixels: np.ndarray
    points: np.ndarray
    views: list[str] = field(default_factory=list)


def render_observations(
    trajectory: np.ndarray,
    rig: Sequence[CameraModel],
    noise: float = 1.0,
    occlusion: float = 0.0,
    shuffle: bool = True,
    seed: int = 0,
    body_margin: float = 10.0,
    first_frame: int = 0,
) -> SimObservations:
    """Project every keypoint into every view as an unlabeled, locally numbered centroid."""
    if not 0.0 <= occlusion <= 1.0:
        raise ValueError("occlusion must lie in [0, 1]")
    n_frames = trajectory.shape[0]
    pixels = np.stack([np.stack([project_many(cam, trajectory[f]) for cam in rig]) for f in range(n_frames)])
    frames, truth = [], []
    for f in range(n_frames):
        fi = first_frame + f
        rng = np.random.default_rng([seed, fi])
        obs_f, truth_f = {}, {}
        for v, cam in enumerate(rig):
            exact = pixels[f, v]
            noisy = exact + rng.normal(0.0, noise, size=exact.shape) if noise > 0 else exact.copy()
            visible = rng.random(len(KEYPOINTS)) >= occlusion
            kp_idx = np.flatnonzero(visible)
            order = rng.permutation(len(kp_idx)) if shuffle else np.arange(len(kp_idx))
            centroids = noisy[kp_idx[order]]
            mapping: dict[str, int | None] = {kp: None for kp in KEYPOINTS}
            for local, src in enumerate(order):
                mapping[KEYPOINTS[kp_idx[src]]] = local
            bbox = Rect.bounding(exact).pad(body_margin)
            obs_f[cam.name] = FrameObservation.build(
                fi, cam.name, bbox, centroids, cam.image_size, image_ref=f"sim://{cam.name}/{fi:06d}"
            )
            truth_f[cam.name] = mapping
        frames.append(obs_f)
        truth.append(truth_f)
    return SimObservations(frames, truth, pixels, np.asarray(trajectory), [c.name for c in rig])


def plant_segments(
    animals: Sequence[str],
    n_frames: int,
    n_behaviors: int,
    fps: float,
    seed: int,
    min_seconds: float = 1.0,
    max_seconds: float = 5.0,
) -> list[ClipSegment]:
    """Random per-animal partitions into 1-5 s segments; neighbours differ in behavior."""
    rng = np.random.default_rng([seed, 7])
    out = []
    for animal in animals:
        pos, prev, i = 0, -1, 0
        while pos < n_frames:
            length = int(round(rng.uniform(min_seconds, max_seconds) * fps))
            end = min(n_frames, pos + max(length, 1))
            if n_frames - end < min_seconds * fps:
                end = n_frames
            choices = [b for b in range(n_behaviors) if b != prev]
            b = int(rng.choice(choices))
            out.append(ClipSegment(animal, pos, end, b, fps, clip_id=f"{animal}:planted{i}"))
            pos, prev, i = end, b, i + 1
    return out


def generate_feature_session(
    animals: Sequence[str] = ("A0", "A1", "A2"),
    planted: Sequence[ClipSegment] | None = None,
    dim: int = 16,
    noise: float = 1.0,
    seed: int = 0,
    n_frames: int = 1800,
    n_behaviors: int = 4,
    fps: float = 10.0,
    separation: float = 6.0,
) -> tuple[list[FeatureSequence], list[ClipSegment]]:
    """Feature sequences whose frames sample a per-behavior Gaussian blob.

    Without ``planted`` segments a random partition is drawn. Blob centers are
    shared across animals and drawn with scale ``separation``.
    """
    if planted is None:
        planted = plant_segments(animals, n_frames, n_behaviors, fps, seed)
    planted = list(planted)
    n_beh = max(s.cluster for s in planted) + 1
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation, size=(n_beh, dim))
    seqs = []
    for animal in animals:
        segs = sorted((s for s in planted if s.animal == animal), key=lambda s: s.start)
        T = segs[-1].end
        X = np.empty((T, dim))
        for s in segs:
            X[s.start : s.end] = centers[s.cluster]
        X += rng.normal(0.0, noise, size=X.shape) if noise > 0 else 0.0
        seqs.append(FeatureSequence(animal, segs[0].fps, X))
    return seqs, planted
