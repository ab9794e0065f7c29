"""Write simulator output in the same file formats the real pipelines read."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import yaml

from .behavior import io as bio
from .clients.oracle import PoseTruth
from .geometry import dump_calibration
from .pose import io as pio
from .pose.model import AssignmentState
from .synth import generate_feature_session, generate_rig, generate_skeleton_trajectory, render_observations


def write_pose_dataset(
    out: str | Path,
    frames: int = 500,
    seed: int = 0,
    noise: float = 1.0,
    occlusion: float = 0.0,
    n_cameras: int = 6,
    p_swap: float = 0.15,
    p_swap_global: float = 0.0,
    ablation: str = "full",
) -> Path:
    """Simulate ``frames`` labeled frames plus three seed frames into ``out``.

    Writes calibration, centroid and box tables, seed labels, hidden truth and
    a ready-to-run ``config.yaml`` using the oracle client.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rig = generate_rig(n_cameras, seed=seed)
    traj = generate_skeleton_trajectory(frames + 3, seed=seed)
    sim = render_observations(traj, rig, noise=noise, occlusion=occlusion, seed=seed)
    views = [c.name for c in rig]

    dump_calibration(rig, out / "calibration.json")
    pio.write_observations(out, sim.frames)
    seeds = [AssignmentState(f, {v: dict(m) for v, m in sim.truth[f].items()}) for f in range(3)]
    pio.write_assignment_table(out / "seeds.csv", seeds)
    pio.write_truth(out / "truth", PoseTruth.from_sim(sim), views)
    config = {
        "calibration": "calibration.json",
        "output": f"run-{ablation}",
        "ablation": ablation,
        "inputs": {"centroids": "centroids.csv", "bboxes": "bboxes.csv", "seeds": "seeds.csv"},
        # the simulator caps motion at 6 mm per frame
        "thresholds": {"max_step_mm": 15.0},
        "client": {
            "kind": "oracle",
            "seed": seed,
            "truth": "truth",
            "corruption": {"p_swap": p_swap, "p_swap_global": p_swap_global},
        },
    }
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    return out / "config.yaml"


def write_behavior_dataset(
    out: str | Path,
    animals: Sequence[str] = ("A0", "A1", "A2"),
    n_frames: int = 1800,
    n_behaviors: int = 4,
    dim: int = 16,
    noise: float = 1.0,
    fps: float = 10.0,
    seed: int = 0,
    k: int = 10,
) -> Path:
    """Simulate per-animal features with planted behavior segments into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seqs, planted = generate_feature_session(
        animals, None, dim=dim, noise=noise, seed=seed, n_frames=n_frames, n_behaviors=n_behaviors, fps=fps
    )
    bio.save_features(out / "features.npz", seqs)
    bio.save_segments(out / "planted.csv", planted)
    config = {
        "features": "features.npz",
        "output": "behavior",
        "dec": {"k": k, "seed": seed},
        "client": {"kind": "oracle", "seed": seed, "planted": "planted.csv"},
    }
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    return out / "config.yaml"
