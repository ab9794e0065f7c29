"""Data model for QD-grounded pose labeling: keypoint schema, frames, assignments."""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from ..errors import EmptyBBox, ValidationError

REGIONS: dict[str, tuple[str, ...]] = {
    "ears": ("ear_L", "ear_R"),
    "back": ("back_top", "back_middle", "back_bottom"),
    "paws": ("forepaw_L", "forepaw_R", "hindpaw_L", "hindpaw_R"),
    "tail": ("tail_base", "tail_middle", "tail_tip"),
}
KEYPOINTS: tuple[str, ...] = tuple(kp for kps in REGIONS.values() for kp in kps)
REGION_OF: dict[str, str] = {kp: region for region, kps in REGIONS.items() for kp in kps}
REGION_INDEX: dict[str, int] = {region: i for i, region in enumerate(REGIONS)}
KEYPOINT_INDEX: dict[str, int] = {kp: i for i, kp in enumerate(KEYPOINTS)}

CROP_PAD_PX = 16.0
CROP_PAD_FRAC = 0.05

PROVENANCES = ("seed", "stage-2", "stage-3", "stage-4")


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle ``[x0, x1] x [y0, y1]`` in pixels."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def empty(self) -> bool:
        return not (self.width > 0 and self.height > 0)

    def contains_rect(self, other: "Rect") -> bool:
        return (
            self.x0 <= other.x0 and self.y0 <= other.y0 and other.x1 <= self.x1 and other.y1 <= self.y1
        )

    def inside(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of the ``(N, 2)`` points lying in the closed rectangle."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return (p[:, 0] >= self.x0) & (p[:, 0] <= self.x1) & (p[:, 1] >= self.y0) & (p[:, 1] <= self.y1)

    def clamp(self, bounds: "Rect") -> "Rect":
        return Rect(
            min(max(self.x0, bounds.x0), bounds.x1),
            min(max(self.y0, bounds.y0), bounds.y1),
            max(min(self.x1, bounds.x1), bounds.x0),
            max(min(self.y1, bounds.y1), bounds.y0),
        )

    def translate(self, dx: float, dy: float) -> "Rect":
        return Rect(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def pad(self, px: float) -> "Rect":
        return Rect(self.x0 - px, self.y0 - px, self.x1 + px, self.y1 + px)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "Rect":
        x0, y0, x1, y1 = (float(v) for v in values)
        return cls(x0, y0, x1, y1)

    @classmethod
    def bounding(cls, points: np.ndarray) -> "Rect":
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return cls(float(p[:, 0].min()), float(p[:, 1].min()), float(p[:, 0].max()), float(p[:, 1].max()))

    @classmethod
    def image(cls, image_size: tuple[int, int]) -> "Rect":
        return cls(0.0, 0.0, float(image_size[0]), float(image_size[1]))


def compute_crop(body_bbox: Rect, image_size: tuple[int, int]) -> Rect:
    """Pad a body box by 16 px plus 5% of its size on each side, clamped to the image."""
    frame = Rect.image(image_size)
    box = body_bbox.clamp(frame)
    if box.empty:
        raise EmptyBBox(f"bounding box {body_bbox.as_list()} is empty inside the image")
    pad_x = CROP_PAD_PX + CROP_PAD_FRAC * box.width
    pad_y = CROP_PAD_PX + CROP_PAD_FRAC * box.height
    return Rect(box.x0 - pad_x, box.y0 - pad_y, box.x1 + pad_x, box.y1 + pad_y).clamp(frame)


@dataclass
class FrameObservation:
    """Numbered candidate centroids for one camera view at one frame.

    Row ``i`` of ``centroids`` is the centroid with local index ``i``.
    """

    frame_index: int
    view: str
    body_bbox: Rect
    crop: Rect
    centroids: np.ndarray
    image_ref: str = ""

    def __post_init__(self) -> None:
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)
        if not self.crop.contains_rect(self.body_bbox.clamp(self.crop)) or self.crop.empty:
            raise ValidationError(f"frame {self.frame_index} view {self.view}: crop does not contain bbox")
        if not np.all(np.isfinite(self.centroids)):
            raise ValidationError(f"frame {self.frame_index} view {self.view}: non-finite centroid")

    @classmethod
    def build(
        cls,
        frame_index: int,
        view: str,
        body_bbox: Rect,
        centroids: np.ndarray,
        image_size: tuple[int, int],
        image_ref: str = "",
    ) -> "FrameObservation":
        box = body_bbox.clamp(Rect.image(image_size))
        return cls(frame_index, view, box, compute_crop(box, image_size), centroids, image_ref)

    @property
    def n_centroids(self) -> int:
        return len(self.centroids)

    def indices_in(self, rect: Rect) -> list[int]:
        return [int(i) for i in np.flatnonzero(rect.inside(self.centroids))]


@dataclass
class AssignmentState:
    """Per-view keypoint-to-centroid mapping for one frame.

    ``views[view][keypoint]`` is a centroid index or ``None`` (unassigned). Every
    keypoint of the schema is present in every view.
    """

    frame_index: int
    views: dict[str, dict[str, int | None]]
    provenance: dict[tuple[str, str], str] = field(default_factory=dict)
    flags: dict[tuple[str, str], list[str]] = field(default_factory=dict)
    frame_flags: list[str] = field(default_factory=list)

    @classmethod
    def empty(cls, frame_index: int, views: Sequence[str]) -> "AssignmentState":
        return cls(frame_index, {v: {kp: None for kp in KEYPOINTS} for v in views})

    def get(self, view: str, keypoint: str) -> int | None:
        return self.views[view][keypoint]

    def set(self, view: str, keypoint: str, index: int | None, provenance: str) -> None:
        self.views[view][keypoint] = None if index is None else int(index)
        self.provenance[(view, keypoint)] = provenance

    def flag(self, view: str, keypoint: str, reason: str) -> None:
        reasons = self.flags.setdefault((view, keypoint), [])
        if reason not in reasons:
            reasons.append(reason)

    def flag_frame(self, reason: str) -> None:
        if reason not in self.frame_flags:
            self.frame_flags.append(reason)

    def owner(self, view: str, index: int) -> str | None:
        for kp, idx in self.views[view].items():
            if idx == index:
                return kp
        return None

    def swap(self, view: str, a: str, b: str, provenance: str) -> None:
        va, vb = self.views[view][a], self.views[view][b]
        self.set(view, a, vb, provenance)
        self.set(view, b, va, provenance)

    def assigned_views(self, keypoint: str) -> list[str]:
        return [v for v in self.views if self.views[v][keypoint] is not None]

    def is_injective(self) -> bool:
        for mapping in self.views.values():
            used = [i for i in mapping.values() if i is not None]
            if len(used) != len(set(used)):
                return False
        return True

    def check(self, observations: Mapping[str, FrameObservation] | None = None) -> None:
        """Raise ``ValidationError`` unless the state is complete, injective and in range."""
        for view, mapping in self.views.items():
            if set(mapping) != set(KEYPOINTS):
                raise ValidationError(f"frame {self.frame_index} view {view}: keypoint set incomplete")
            used = [i for i in mapping.values() if i is not None]
            if len(used) != len(set(used)):
                raise ValidationError(f"frame {self.frame_index} view {view}: centroid assigned twice")
            if observations is not None and view in observations:
                n = observations[view].n_centroids
                bad = [i for i in used if not 0 <= i < n]
                if bad:
                    raise ValidationError(
                        f"frame {self.frame_index} view {view}: centroid index {bad[0]} out of range"
                    )

    def same_assignment(self, other: "AssignmentState") -> bool:
        return self.views == other.views

    def copy(self) -> "AssignmentState":
        return copy.deepcopy(self)

    def records(self) -> Iterator[tuple[str, str, int | None, str, list[str]]]:
        for view, mapping in self.views.items():
            for kp in KEYPOINTS:
                yield (
                    view,
                    kp,
                    mapping[kp],
                    self.provenance.get((view, kp), ""),
                    self.flags.get((view, kp), []),
                )


def region_boxes_from_assignment(
    state: AssignmentState,
    observations: Mapping[str, FrameObservation],
    margin: float,
) -> dict[str, dict[str, Rect]]:
    """Boxes around each region's assigned centroids, used to annotate exemplars."""
    boxes: dict[str, dict[str, Rect]] = {}
    for view, obs in observations.items():
        boxes[view] = {}
        for region, kps in REGIONS.items():
            idx = [state.get(view, kp) for kp in kps if state.get(view, kp) is not None]
            if idx:
                rect = Rect.bounding(obs.centroids[idx]).pad(margin).clamp(obs.crop)
            else:
                rect = obs.crop
            boxes[view][region] = rect
    return boxes


@dataclass
class WindowEntry:
    frame_index: int
    assignments: AssignmentState
    observations: dict[str, FrameObservation]
    regions: dict[str, dict[str, Rect]]


class RollingWindow:
    """The three most recent completed frames, reused as few-shot exemplars."""

    capacity = 3

    def __init__(self, entries: Sequence[WindowEntry]) -> None:
        if len(entries) != self.capacity:
            raise ValidationError(f"rolling window needs exactly {self.capacity} seed frames, got {len(entries)}")
        self._entries: deque[WindowEntry] = deque(maxlen=self.capacity)
        for e in entries:
            self.append(e)

    def append(self, entry: WindowEntry) -> None:
        if self._entries and entry.frame_index <= self._entries[-1].frame_index:
            raise ValidationError(
                f"window frames must increase: {entry.frame_index} after {self._entries[-1].frame_index}"
            )
        self._entries.append(entry)

    @property
    def entries(self) -> list[WindowEntry]:
        return list(self._entries)

    @property
    def frame_indices(self) -> list[int]:
        return [e.frame_index for e in self._entries]

    @property
    def latest(self) -> WindowEntry:
        return self._entries[-1]

    def __len__(self) -> int:
        return len(self._entries)
