"""Deterministic clients that answer from ground-truth tables.

Corruption is seeded per request (task, frame, view, region) rather than per
call order, so answers do not depend on concurrency or on resuming a run.
"""

from __future__ import annotations

import json
import threading
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from ..errors import ClientUnavailable
from ..pose.model import KEYPOINTS, REGION_INDEX, REGION_OF, REGIONS, Rect
from .base import PerceptionClient, PerceptionRequest

_TASK_CODE = {"region-detect": 1, "region-assign": 2, "reconcile": 3, "caption": 4, "merge": 5}


@dataclass(frozen=True)
class CorruptionSpec:
    """Error model of the simulated perception client.

    p_swap : probability that a region answer exchanges two of its keypoints.
    box_jitter : max shift (px) of each region-box edge.
    p_drop : probability that a keypoint is answered as unassigned.
    p_swap_global : for whole-body requests (no region decomposition), the
        probability that a keypoint is confused with its nearest keypoint from
        another region, on top of within-region swaps.
    """

    p_swap: float = 0.0
    box_jitter: float = 0.0
    p_drop: float = 0.0
    p_swap_global: float = 0.0

    def __post_init__(self) -> None:
        for name in ("p_swap", "p_drop", "p_swap_global"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.box_jitter < 0:
            raise ValueError("box_jitter must be non-negative")


@dataclass
class PoseTruth:
    """Hidden per-frame answers: centroid owner per view and exact keypoint pixels."""

    assignments: dict[int, dict[str, dict[str, int | None]]]
    pixels: dict[int, dict[str, np.ndarray]]
    points: dict[int, np.ndarray] = field(default_factory=dict)
    region_margin: float = 12.0

    @classmethod
    def from_sim(cls, sim, region_margin: float = 12.0) -> "PoseTruth":
        assignments, pixels, points = {}, {}, {}
        for f, obs in enumerate(sim.frames):
            fi = next(iter(obs.values())).frame_index
            assignments[fi] = sim.truth[f]
            pixels[fi] = {v: sim.pixels[f, j] for j, v in enumerate(sim.views)}
            points[fi] = sim.points[f]
        return cls(assignments, pixels, points, region_margin)

    def region_box(self, frame: int, view: str, region: str) -> Rect:
        idx = [KEYPOINTS.index(kp) for kp in REGIONS[region]]
        return Rect.bounding(self.pixels[frame][view][idx]).pad(self.region_margin)


@dataclass
class BehaviorTruth:
    """Planted behavior segments; ``names`` maps behavior id to a label."""

    planted: Sequence[Any]
    names: Mapping[int, str] = field(default_factory=dict)

    def _majority(self, animal: str, start: int, end: int):
        best, best_overlap = None, -1
        for seg in self.planted:
            if seg.animal != animal:
                continue
            overlap = min(end, seg.end) - max(start, seg.start)
            if overlap > best_overlap:
                best, best_overlap = seg, overlap
        return best

    def label(self, behavior: int) -> str:
        return self.names.get(behavior, f"behavior {behavior}")

    def caption(self, animal: str, start: int, end: int) -> dict[str, str]:
        seg = self._majority(animal, start, end)
        label = self.label(seg.cluster)
        return {
            "label": label,
            "description": f"{animal} is {label} from frame {start} to {end}; posture and speed steady.",
        }

    def group_key(self, animal: str, start: int, end: int) -> str:
        return self._majority(animal, start, end).clip_id


def _view_code(view: str) -> int:
    return zlib.crc32(view.encode()) & 0x7FFFFFFF


class OracleClient(PerceptionClient):
    """Answers every task from ground truth, with seeded corruption.

    Injected within-region swaps are recorded in :attr:`swap_events` as
    ``(frame, view, keypoint_a, keypoint_b)``.
    """

    def __init__(
        self,
        pose: PoseTruth | None = None,
        behavior: BehaviorTruth | None = None,
        corruption: CorruptionSpec = CorruptionSpec(),
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.pose = pose
        self.behavior = behavior
        self.corruption = corruption
        self.seed = seed
        self._events_lock = threading.Lock()
        self._swaps: dict[tuple, tuple[int, str, str, str]] = {}

    @property
    def swap_events(self) -> list[tuple[int, str, str, str]]:
        with self._events_lock:
            return sorted(self._swaps.values())

    def _rng(self, task: str, ctx: Mapping[str, Any], salt: int = 0) -> np.random.Generator:
        region = ctx.get("region", "")
        rcode = REGION_INDEX.get(region, len(REGION_INDEX))
        return np.random.default_rng(
            [self.seed, _TASK_CODE[task], int(ctx.get("frame", 0)), _view_code(str(ctx.get("view", ""))), rcode, salt]
        )

    def complete(self, request: PerceptionRequest, feedback: Sequence[str]) -> str:
        handler: Callable[[PerceptionRequest], dict[str, Any]] = {
            "region-detect": self._detect,
            "region-assign": self._assign,
            "reconcile": self._reconcile,
            "caption": self._caption,
            "merge": self._merge,
        }[request.task]
        return json.dumps(handler(request))

    def _need_pose(self) -> PoseTruth:
        if self.pose is None:
            raise ClientUnavailable("oracle has no pose ground truth")
        return self.pose

    def _detect(self, req: PerceptionRequest) -> dict[str, Any]:
        truth = self._need_pose()
        ctx = req.context
        box = truth.region_box(ctx["frame"], ctx["view"], ctx["region"])
        a = self.corruption.box_jitter
        if a > 0:
            d = self._rng("region-detect", ctx).uniform(-a, a, size=4)
            box = Rect(box.x0 + d[0], box.y0 + d[1], box.x1 + d[2], box.y1 + d[3])
        return {"box": box.as_list()}

    def _assign(self, req: PerceptionRequest) -> dict[str, Any]:
        truth = self._need_pose()
        ctx = req.context
        frame, view = ctx["frame"], ctx["view"]
        candidates = set(ctx["candidates"])
        keypoints = list(ctx["keypoints"])
        gt = truth.assignments[frame][view]
        answer = {kp: (gt[kp] if gt[kp] in candidates else None) for kp in keypoints}
        c = self.corruption
        rng = self._rng("region-assign", ctx)
        regions = [r for r in REGIONS if any(kp in keypoints for kp in REGIONS[r])]
        for region in regions:
            kps = [kp for kp in REGIONS[region] if kp in answer]
            if len(kps) >= 2 and rng.random() < c.p_swap:
                a, b = (kps[i] for i in sorted(rng.choice(len(kps), size=2, replace=False)))
                answer[a], answer[b] = answer[b], answer[a]
                if answer[a] != answer[b]:
                    with self._events_lock:
                        self._swaps[(frame, view, region)] = (frame, view, a, b)
        if c.p_swap_global > 0 and len(regions) > 1:
            px = truth.pixels[frame][view]
            for kp in keypoints:
                if rng.random() >= c.p_swap_global:
                    continue
                i = KEYPOINTS.index(kp)
                others = [o for o in keypoints if REGION_OF[o] != REGION_OF[kp]]
                d = [float(np.hypot(*(px[KEYPOINTS.index(o)] - px[i]))) for o in others]
                other = others[int(np.argmin(d))]
                answer[kp], answer[other] = answer[other], answer[kp]
        if c.p_drop > 0:
            for kp in keypoints:
                if rng.random() < c.p_drop:
                    answer[kp] = None
        return {"assignments": answer}

    def _reconcile(self, req: PerceptionRequest) -> dict[str, Any]:
        truth = self._need_pose()
        ctx = req.context
        gt = truth.assignments[ctx["frame"]][ctx["view"]]
        open_idx = set(ctx["unused"]) | {int(i) for i in ctx["conflicts"]}
        involved = set(ctx["unassigned"]) | {kp for kps in ctx["conflicts"].values() for kp in kps}
        return {
            "assignments": {
                kp: (gt[kp] if gt[kp] in open_idx else None) for kp in KEYPOINTS if kp in involved
            }
        }

    def _caption(self, req: PerceptionRequest) -> dict[str, Any]:
        if self.behavior is None:
            raise ClientUnavailable("oracle has no behavior ground truth")
        ctx = req.context
        return self.behavior.caption(ctx["animal"], ctx["start"], ctx["end"])

    def _merge(self, req: PerceptionRequest) -> dict[str, Any]:
        if self.behavior is None:
            raise ClientUnavailable("oracle has no behavior ground truth")
        ctx = req.context
        groups: list[dict[str, Any]] = []
        last_key = None
        for clip in ctx["clips"]:
            key = self.behavior.group_key(ctx["animal"], clip["start"], clip["end"])
            if key != last_key:
                caption = self.behavior.caption(ctx["animal"], clip["start"], clip["end"])
                groups.append({"clips": [], "label": caption["label"], "description": caption["description"]})
                last_key = key
            groups[-1]["clips"].append(clip["clip_id"])
        return {"segments": groups}


class ScriptedClient(PerceptionClient):
    """Replays a fixed script of raw responses, one per attempt.

    Items may be strings, exceptions (raised), or callables taking
    ``(request, feedback)``. The last item repeats once the script runs out.
    """

    def __init__(self, script: Sequence[Any]) -> None:
        super().__init__()
        if not script:
            raise ValueError("script must not be empty")
        self.script = list(script)
        self.requests: list[PerceptionRequest] = []
        self.feedback_seen: list[tuple[str, ...]] = []
        self._pos = 0

    def complete(self, request: PerceptionRequest, feedback: Sequence[str]) -> str:
        with self._lock:
            item = self.script[min(self._pos, len(self.script) - 1)]
            self._pos += 1
            self.requests.append(request)
            self.feedback_seen.append(tuple(feedback))
        if isinstance(item, BaseException):
            raise item
        if callable(item):
            return item(request, feedback)
        return item


class UnavailableClient(PerceptionClient):
    """Always fails with :class:`ClientUnavailable`; exercises fallback paths."""

    def complete(self, request: PerceptionRequest, feedback: Sequence[str]) -> str:
        raise ClientUnavailable("client disabled")
