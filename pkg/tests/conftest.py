from __future__ import annotations

import numpy as np
import pytest

from vlmlabel.clients.oracle import PoseTruth
from vlmlabel.geometry import CameraModel
from vlmlabel.pose.model import AssignmentState
from vlmlabel.synth import generate_rig, generate_skeleton_trajectory, render_observations


@pytest.fixture(scope="session")
def rig() -> list[CameraModel]:
    return generate_rig(6, seed=0)


@pytest.fixture(scope="session")
def cams(rig) -> dict[str, CameraModel]:
    return {c.name: c for c in rig}


def make_sim(rig, frames: int, seed: int = 0, noise: float = 1.0, occlusion: float = 0.0):
    traj = generate_skeleton_trajectory(frames, seed=seed)
    return render_observations(traj, rig, noise=noise, occlusion=occlusion, seed=seed)


def seeds_of(sim, frames=(0, 1, 2)):
    return [
        (AssignmentState(f, {v: dict(m) for v, m in sim.truth[f].items()}, provenance={}), sim.frames[f])
        for f in frames
    ]


def truth_state(sim, f: int) -> AssignmentState:
    return AssignmentState(f, {v: dict(m) for v, m in sim.truth[f].items()}, provenance={})


@pytest.fixture(scope="session")
def small_sim(rig):
    return make_sim(rig, 30, seed=3)


@pytest.fixture(scope="session")
def small_truth(small_sim) -> PoseTruth:
    return PoseTruth.from_sim(small_sim)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one summary line per acceptance criterion, printed after the run."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
