"""Perception stages of the pose pipeline: region boxes, within-region and cross-region assignment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from ..clients import prompts
from ..clients.base import Attachment, PerceptionClient, PerceptionRequest
from ..errors import ClientSchemaError, ClientUnavailable
from .model import (
    KEYPOINT_INDEX,
    KEYPOINTS,
    REGION_INDEX,
    REGION_OF,
    REGIONS,
    AssignmentState,
    FrameObservation,
    Rect,
    RollingWindow,
)
from .render import color_name

log = logging.getLogger(__name__)

WHOLE_BODY = "whole-body"


@dataclass
class RegionDetection:
    boxes: dict[str, Rect]
    flags: list[str] = field(default_factory=list)
    retries: int = 0
    unavailable: bool = False


@dataclass
class PartialAssignment:
    assignments: dict[str, int | None]
    flags: list[str] = field(default_factory=list)
    retries: int = 0
    unavailable: bool = False
    called: bool = True


def _points(frame: FrameObservation, indices: Sequence[int]) -> tuple[tuple[int, float, float], ...]:
    return tuple((i, float(frame.centroids[i, 0]), float(frame.centroids[i, 1])) for i in indices)


def _box_validator(payload: dict[str, Any]) -> str | None:
    x0, y0, x1, y1 = payload["box"]
    if not all(math.isfinite(v) for v in (x0, y0, x1, y1)):
        return "box coordinates must be finite"
    if not (x1 > x0 and y1 > y0):
        return "box must satisfy x0 < x1 and y0 < y1"
    return None


def detect_regions(
    view: str,
    frame: FrameObservation,
    window: RollingWindow,
    client: PerceptionClient,
    max_retries: int = 2,
) -> RegionDetection:
    """Predict one box per region for a view, prompting with the window's exemplars.

    Boxes are clamped to the crop. On a client failure the previous frame's box,
    shifted by the change in crop origin, is reused and the region is flagged.
    """
    result = RegionDetection({})
    prev = window.latest
    for region, kps in REGIONS.items():
        exemplars = [
            Attachment(
                e.observations[view].image_ref,
                role="exemplar",
                crop=e.observations[view].crop,
                boxes=((region, e.regions[view][region]),),
                caption=f"exemplar frame {e.frame_index}",
            )
            for e in window.entries
        ]
        target = Attachment(frame.image_ref, role="target", crop=frame.crop, caption=f"current frame {frame.frame_index}")
        request = PerceptionRequest(
            task="region-detect",
            prompt=prompts.render(
                "region_detect",
                n_exemplars=len(exemplars),
                view=view,
                region=region,
                keypoints=", ".join(kps),
                color=color_name(region),
                frame=frame.frame_index,
            ),
            attachments=exemplars + [target],
            schema_id="region-box/v1",
            max_retries=max_retries,
            context={"frame": frame.frame_index, "view": view, "region": region, "crop": frame.crop.as_list()},
            validator=_box_validator,
        )
        box: Rect | None = None
        try:
            response = client.call(request)
            result.retries += response.retries
            raw = Rect.from_seq(response.payload["box"])
            box = raw.clamp(frame.crop)
            if box != raw:
                log.warning("frame %d %s %s: box %s clamped to crop", frame.frame_index, view, region, raw.as_list())
            if box.empty:
                box = None
                result.flags.append(f"region-outside-crop:{region}")
        except ClientSchemaError as exc:
            result.retries += exc.attempts - 1
            result.flags.append(f"region-schema-error:{region}")
        except ClientUnavailable:
            result.unavailable = True
            result.flags.append(f"client-unavailable:{region}")
        if box is None:
            old = prev.regions[view][region]
            old_crop = prev.observations[view].crop
            box = old.translate(frame.crop.x0 - old_crop.x0, frame.crop.y0 - old_crop.y0).clamp(frame.crop)
            if box.empty:
                box = frame.crop
            result.flags.append(f"region-fallback:{region}")
        result.boxes[region] = box
    return result


def _assignment_validator(keypoints: Sequence[str], candidates: Sequence[int]):
    allowed = set(candidates)

    def check(payload: dict[str, Any]) -> str | None:
        answer = payload["assignments"]
        missing = [kp for kp in keypoints if kp not in answer]
        extra = [kp for kp in answer if kp not in keypoints]
        if missing:
            return f"missing keypoints: {', '.join(missing)}"
        if extra:
            return f"unknown keypoints: {', '.join(extra)}"
        used = [v for v in answer.values() if v is not None]
        bad = [v for v in used if v not in allowed]
        if bad:
            return f"numbers {bad} are not candidates; choose from {sorted(allowed)}"
        if len(used) != len(set(used)):
            return "a candidate number was assigned to more than one keypoint"
        return None

    return check


def _exemplar_labels(window: RollingWindow, view: str, keypoints: Sequence[str]) -> str:
    lines = []
    for e in window.entries:
        pairs = ", ".join(f"{kp}={e.assignments.get(view, kp)}" for kp in keypoints)
        lines.append(f"  frame {e.frame_index}: {pairs}")
    return "\n".join(lines)


def assign_within_region(
    region: str,
    region_box: Rect,
    frame: FrameObservation,
    window: RollingWindow,
    client: PerceptionClient,
    max_retries: int = 2,
) -> PartialAssignment:
    """Map each keypoint of ``region`` to a centroid inside ``region_box`` (or ``None``).

    ``region`` may be :data:`WHOLE_BODY`, in which case all twelve keypoints are
    assigned at once over every centroid of the crop.
    """
    view = frame.view
    keypoints = KEYPOINTS if region == WHOLE_BODY else REGIONS[region]
    candidates = frame.indices_in(region_box)
    empty = {kp: None for kp in keypoints}
    if not candidates:
        return PartialAssignment(empty, called=False)
    exemplars = []
    for e in window.entries:
        obs = e.observations[view]
        ebox = obs.crop if region == WHOLE_BODY else e.regions[view][region]
        idx = obs.indices_in(ebox)
        exemplars.append(
            Attachment(obs.image_ref, role="exemplar", crop=ebox, points=_points(obs, idx), caption=f"exemplar frame {e.frame_index}")
        )
    target = Attachment(frame.image_ref, role="target", crop=region_box, points=_points(frame, candidates))
    request = PerceptionRequest(
        task="region-assign",
        prompt=prompts.render(
            "region_assign",
            n_exemplars=len(exemplars),
            region=region,
            exemplar_labels=_exemplar_labels(window, view, keypoints),
            frame=frame.frame_index,
            view=view,
            candidates=", ".join(map(str, candidates)),
            keypoints=", ".join(keypoints),
        ),
        attachments=exemplars + [target],
        schema_id="assignment/v1",
        max_retries=max_retries,
        context={
            "frame": frame.frame_index,
            "view": view,
            "region": region,
            "candidates": candidates,
            "keypoints": list(keypoints),
        },
        validator=_assignment_validator(keypoints, candidates),
    )
    try:
        response = client.call(request)
    except ClientSchemaError as exc:
        return PartialAssignment(empty, [f"stage2-schema-error:{region}"], retries=exc.attempts - 1)
    except ClientUnavailable:
        return PartialAssignment(empty, [f"client-unavailable:{region}"], unavailable=True)
    answer = response.payload["assignments"]
    return PartialAssignment({kp: answer[kp] for kp in keypoints}, retries=response.retries)


def _claim_order(kp: str) -> tuple[int, int]:
    return (REGION_INDEX[REGION_OF[kp]], KEYPOINT_INDEX[kp])


@dataclass
class ReconcileReport:
    called: bool = False
    fallback: bool = False
    unavailable: bool = False
    retries: int = 0


def reconcile_view(
    state: AssignmentState,
    frame: FrameObservation,
    client: PerceptionClient | None,
    max_retries: int = 2,
) -> ReconcileReport:
    """Resolve conflicts and fill gaps of one view of ``state`` in place.

    Entries that are neither in conflict nor unassigned are never changed. If
    the client cannot resolve the view, each contested centroid stays with the
    claimant of the lowest region index and the others are unassigned and
    flagged.
    """
    view = frame.view
    report = ReconcileReport()
    mapping = state.views[view]
    claims: dict[int, list[str]] = {}
    for kp in KEYPOINTS:
        idx = mapping[kp]
        if idx is not None:
            claims.setdefault(idx, []).append(kp)
    conflicts = {idx: kps for idx, kps in claims.items() if len(kps) > 1}
    unassigned = [kp for kp in KEYPOINTS if mapping[kp] is None]
    unused = [i for i in range(frame.n_centroids) if i not in claims]
    if not conflicts and not (unassigned and unused):
        return report

    involved = set(unassigned) | {kp for kps in conflicts.values() for kp in kps}
    open_idx = set(unused) | set(conflicts)
    fixed = {kp: idx for kp, idx in mapping.items() if kp not in involved and idx is not None}

    def check(payload: dict[str, Any]) -> str | None:
        answer = payload["assignments"]
        extra = [kp for kp in answer if kp not in involved]
        if extra:
            return f"only conflicting or unassigned keypoints may change: {', '.join(extra)}"
        used = [v for v in answer.values() if v is not None]
        bad = [v for v in used if v not in open_idx]
        if bad:
            return f"numbers {bad} are not available; choose from {sorted(open_idx)}"
        if len(used) != len(set(used)) or set(used) & set(fixed.values()):
            return "a number is still assigned to more than one keypoint"
        unresolved = [kp for kps in conflicts.values() for kp in kps if kp not in answer]
        if unresolved:
            return f"conflicting keypoints left unresolved: {', '.join(unresolved)}"
        return None

    if client is not None:
        report.called = True
        request = PerceptionRequest(
            task="reconcile",
            prompt=prompts.render(
                "reconcile",
                frame=frame.frame_index,
                view=view,
                candidates=", ".join(str(i) for i in range(frame.n_centroids)),
                assignments=", ".join(f"{kp}={mapping[kp]}" for kp in KEYPOINTS),
                conflicts="; ".join(f"{i}: {', '.join(kps)}" for i, kps in sorted(conflicts.items())) or "none",
                unassigned=", ".join(unassigned) or "none",
                unused=", ".join(map(str, unused)) or "none",
            ),
            attachments=[
                Attachment(
                    frame.image_ref,
                    role="target",
                    crop=frame.crop,
                    points=_points(frame, range(frame.n_centroids)),
                )
            ],
            schema_id="assignment/v1",
            max_retries=max_retries,
            context={
                "frame": frame.frame_index,
                "view": view,
                "assignments": dict(mapping),
                "conflicts": {str(i): kps for i, kps in conflicts.items()},
                "unassigned": unassigned,
                "unused": unused,
            },
            validator=check,
        )
        try:
            response = client.call(request)
        except ClientSchemaError as exc:
            report.retries += exc.attempts - 1
        except ClientUnavailable:
            report.unavailable = True
        else:
            report.retries += response.retries
            for kp, idx in response.payload["assignments"].items():
                if mapping[kp] != idx:
                    state.set(view, kp, idx, "stage-3")
            return report

    report.fallback = True
    for idx, kps in sorted(conflicts.items()):
        keeper, *losers = sorted(kps, key=_claim_order)
        for kp in losers:
            state.set(view, kp, None, "stage-3")
            state.flag(view, kp, "reconcile-fallback")
    state.flag_frame("reconcile-fallback")
    return report


def reconcile_frame(
    partials: Mapping[str, Mapping[str, int | None]],
    observations: Mapping[str, FrameObservation],
    client: PerceptionClient | None,
    frame_index: int,
    max_retries: int = 2,
) -> tuple[AssignmentState, dict[str, ReconcileReport]]:
    """Merge per-region answers of every view into one injective frame assignment."""
    state = AssignmentState.empty(frame_index, list(observations))
    for view, mapping in partials.items():
        for kp in KEYPOINTS:
            state.set(view, kp, mapping.get(kp), "stage-2")
    reports = {view: reconcile_view(state, observations[view], client, max_retries) for view in observations}
    return state, reports
