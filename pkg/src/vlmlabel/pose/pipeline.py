"""Frame-by-frame orchestration of the pose labeling pipeline.

Ablation modes
--------------
``full``       region boxes, within-region assignment, reconciliation, consensus refinement
``no-refine``  as ``full`` but 3D points come from plain all-view DLT, assignments untouched
``naive``      one whole-body assignment call per view, reconciliation, plain DLT
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..consensus import (
    Keypoint3DEstimate,
    MotionCheck,
    QCVerdict,
    RefineConfig,
    plain_estimates,
    qc_filter,
    refine_frame,
)
from ..errors import ClientUnavailable, ValidationError
from ..geometry import CameraModel
from ..clients.base import PerceptionClient
from .model import (
    REGIONS,
    AssignmentState,
    FrameObservation,
    Rect,
    RollingWindow,
    WindowEntry,
    region_boxes_from_assignment,
)
from .stages import WHOLE_BODY, assign_within_region, detect_regions, reconcile_frame

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no-refine", "naive")


@dataclass(frozen=True)
class PoseConfig:
    ablation: str = "full"
    refine: RefineConfig = field(default_factory=RefineConfig)
    max_retries: int = 2
    workers: int = 4
    strict_window: bool = False
    region_margin: float = 12.0
    max_consecutive_unavailable: int = 5
    # flag 3D jumps above this many mm per frame; None disables the check
    max_step_mm: float | None = None

    def __post_init__(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.max_step_mm is not None and not self.max_step_mm > 0:
            raise ValueError("max_step_mm must be positive")


@dataclass
class FrameResult:
    frame_index: int
    state: AssignmentState
    estimates: list[Keypoint3DEstimate]
    failed: dict[str, str]
    qc: list[QCVerdict]
    regions: dict[str, dict[str, Rect]]
    log: list[dict]
    unavailable: bool = False

    @property
    def degraded(self) -> bool:
        return bool(self.state.frame_flags)


Frame = Mapping[str, FrameObservation]


def seed_window(
    seeds: Sequence[tuple[AssignmentState, Frame]], region_margin: float = 12.0
) -> RollingWindow:
    """Validate three labeled seed frames and build the initial window."""
    if len(seeds) != RollingWindow.capacity:
        raise ValidationError(f"expected {RollingWindow.capacity} seed frames, got {len(seeds)}")
    entries = []
    for state, obs in sorted(seeds, key=lambda s: s[0].frame_index):
        state.check(obs)
        if set(state.views) != set(obs):
            raise ValidationError(f"seed frame {state.frame_index}: views do not match observations")
        entries.append(
            WindowEntry(state.frame_index, state, dict(obs), region_boxes_from_assignment(state, obs, region_margin))
        )
    return RollingWindow(entries)


def process_frame(
    observations: Frame,
    window: RollingWindow,
    cameras: Mapping[str, CameraModel],
    config: PoseConfig,
    client: PerceptionClient,
    executor: ThreadPoolExecutor | None = None,
) -> FrameResult:
    frame_index = next(iter(observations.values())).frame_index
    views = list(observations)
    run = executor.map if executor is not None else map
    flags: list[str] = []
    unavailable_calls, total_calls = 0, 0

    if config.ablation == "naive":
        partial_results = list(
            run(lambda v: assign_within_region(WHOLE_BODY, observations[v].crop, observations[v], window, client, config.max_retries), views)
        )
        partials = {v: p.assignments for v, p in zip(views, partial_results)}
        regions = None
        for p in partial_results:
            flags += p.flags
            total_calls += p.called
            unavailable_calls += p.unavailable
    else:
        detections = list(run(lambda v: detect_regions(v, observations[v], window, client, config.max_retries), views))
        regions = {v: d.boxes for v, d in zip(views, detections)}
        for d in detections:
            flags += d.flags
            total_calls += len(REGIONS)
            unavailable_calls += sum(f.startswith("client-unavailable") for f in d.flags)
        jobs = [(v, r) for v in views for r in REGIONS]
        partial_results = list(
            run(lambda job: assign_within_region(job[1], regions[job[0]][job[1]], observations[job[0]], window, client, config.max_retries), jobs)
        )
        partials = {v: {} for v in views}
        for (v, _), p in zip(jobs, partial_results):
            partials[v].update(p.assignments)
            flags += p.flags
            total_calls += p.called
            unavailable_calls += p.unavailable

    state, reports = reconcile_frame(partials, observations, client, frame_index, config.max_retries)
    for view, rep in reports.items():
        total_calls += rep.called
        unavailable_calls += rep.unavailable
        if rep.fallback:
            flags.append(f"reconcile-fallback:{view}")
    for f in flags:
        state.flag_frame(f)
    state.check(observations)

    if config.ablation == "full":
        refined = refine_frame(state, observations, cameras, config.refine)
        state, estimates, failed, rlog = refined.state, refined.estimates, refined.failed, refined.log
        state.check(observations)
    else:
        estimates, failed = plain_estimates(state, observations, cameras, config.refine.ransac.tau_reproj)
        rlog = []

    if regions is None:
        regions = region_boxes_from_assignment(state, observations, config.region_margin)
    qc = qc_filter(estimates, config.refine.tau_qc, failed)
    if state.frame_flags:
        qc.append(QCVerdict("*", "flag", "degraded:" + ",".join(state.frame_flags)))
    return FrameResult(
        frame_index,
        state,
        estimates,
        failed,
        qc,
        regions,
        rlog,
        unavailable=total_calls > 0 and unavailable_calls == total_calls,
    )


def window_positions(
    window: RollingWindow, cameras: Mapping[str, CameraModel], tau_reproj: float
) -> dict[str, tuple[int, np.ndarray]]:
    """Latest triangulated position of each keypoint over the window's labeled frames."""
    out: dict[str, tuple[int, np.ndarray]] = {}
    for entry in window.entries:
        estimates, _ = plain_estimates(entry.assignments, entry.observations, cameras, tau_reproj)
        for est in estimates:
            out[est.keypoint] = (entry.frame_index, est.point)
    return out


def run_sequence(
    frames: Sequence[Frame],
    seeds: Sequence[tuple[AssignmentState, Frame]] | None,
    cameras: Mapping[str, CameraModel],
    config: PoseConfig,
    client: PerceptionClient,
    on_frame: Callable[[FrameResult], None] | None = None,
    window: RollingWindow | None = None,
    motion_reference: Mapping[str, tuple[int, np.ndarray]] | None = None,
) -> list[FrameResult]:
    """Label ``frames`` in order, feeding each finished frame back into the window.

    Either ``seeds`` (three labeled frames) or a restored ``window`` must be
    given. Per-frame client failures degrade that frame; the run aborts with
    :class:`ClientUnavailable` only after ``max_consecutive_unavailable``
    frames in which every call failed to reach the client.

    With ``config.max_step_mm`` set, keypoints whose 3D point jumps too far
    from their last accepted position are flagged; ``motion_reference``
    restores those positions when a run is resumed.
    """
    if window is None:
        if seeds is None:
            raise ValueError("run_sequence needs seeds or a restored window")
        window = seed_window(seeds, config.region_margin)
    results = []
    dead_streak = 0
    motion = None
    if config.max_step_mm:
        if motion_reference is None:
            motion_reference = window_positions(window, cameras, config.refine.ransac.tau_reproj)
        motion = MotionCheck(config.max_step_mm, motion_reference)
    executor = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for obs in frames:
            frame_index = next(iter(obs.values())).frame_index
            if frame_index <= window.latest.frame_index:
                raise ValidationError(f"frame {frame_index} does not follow window frame {window.latest.frame_index}")
            result = process_frame(obs, window, cameras, config, client, executor)
            dead_streak = dead_streak + 1 if result.unavailable else 0
            if dead_streak >= config.max_consecutive_unavailable:
                raise ClientUnavailable(f"client unreachable for {dead_streak} consecutive frames")
            if motion is not None:
                result.qc = motion.apply(frame_index, result.estimates, result.qc)
            flagged = result.degraded or any(v.verdict == "flag" for v in result.qc)
            if not (config.strict_window and flagged):
                window.append(WindowEntry(frame_index, result.state, dict(obs), result.regions))
            results.append(result)
            if on_frame is not None:
                on_frame(result)
    finally:
        if executor is not None:
            executor.shutdown()
    return results
