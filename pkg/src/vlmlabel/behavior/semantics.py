"""Clip captioning, caption-driven merging, and the final per-animal timeline.

Timeline document (JSON, ``"version": 1``)::

    {"version": 1,
     "session": {...free metadata...},
     "animals": {"<animal>": {"n_frames": int, "fps": float,
                              "segments": [{"start", "end", "label", "description",
                                            "flags": [...], "clips": [{"clip_id", "start", "end",
                                            "cluster", "label", "description", "flags"}]}]}}}

Flat table (CSV, version 1): ``animal,start,end,start_s,end_s,label,description,clips,clusters,flags``
with ``;``-separated lists.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from ..clients import prompts
from ..clients.base import Attachment, PerceptionClient, PerceptionRequest
from ..errors import ClientSchemaError, ClientUnavailable, ValidationError
from .segments import ClipSegment

CAPTION_FPS = 10.0
MAX_LABEL_WORDS = 6
EPOCH_SECONDS = 60.0
UNCAPTIONED = "uncaptioned"
TIMELINE_VERSION = 1
TABLE_HEADER = ["animal", "start", "end", "start_s", "end_s", "label", "description", "clips", "clusters", "flags"]


@dataclass(frozen=True)
class ClipCaption:
    clip: ClipSegment
    label: str
    description: str
    fps: float = CAPTION_FPS
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.label.strip() or len(self.label.split()) > MAX_LABEL_WORDS:
            raise ValidationError(f"{self.clip.clip_id}: label must have 1-{MAX_LABEL_WORDS} words")
        if not self.description.strip():
            raise ValidationError(f"{self.clip.clip_id}: empty description")

    @property
    def captioned(self) -> bool:
        return UNCAPTIONED not in self.flags


@dataclass(frozen=True)
class MergedSegment:
    animal: str
    start: int
    end: int
    label: str
    description: str
    clips: tuple[ClipCaption, ...]
    flags: tuple[str, ...] = ()

    @property
    def clip_ids(self) -> tuple[str, ...]:
        return tuple(c.clip.clip_id for c in self.clips)

    @property
    def clusters(self) -> tuple[int, ...]:
        return tuple(c.clip.cluster for c in self.clips)

    @property
    def n_frames(self) -> int:
        return self.end - self.start


class VideoSource:
    """Maps ``(animal, frame)`` to an image reference for captioning.

    ``pattern`` is a format string with ``{animal}`` and ``{frame}`` fields;
    the whole scene is referenced, the focal animal is named in the prompt.
    """

    def __init__(self, pattern: str = "video://{animal}/{frame:06d}") -> None:
        self.pattern = pattern

    def frame_ref(self, animal: str, frame: int) -> str:
        return self.pattern.format(animal=animal, frame=frame)


def downsample_frames(start: int, end: int, fps: float, target_fps: float = CAPTION_FPS) -> list[int]:
    """Uniformly spaced frame indices of ``[start, end)`` at ``target_fps``.

    Sources slower than the target are used frame by frame.
    """
    if end <= start:
        return []
    step = max(fps / target_fps, 1.0)
    n = math.ceil((end - start) / step - 1e-9)
    return [start + int(math.floor(k * step + 1e-9)) for k in range(n)]


def _caption_validator(payload: dict[str, Any]) -> str | None:
    words = payload["label"].split()
    if not words:
        return "label must not be blank"
    if len(words) > MAX_LABEL_WORDS:
        return f"label has {len(words)} words; use at most {MAX_LABEL_WORDS}"
    return None


def uncaptioned(clip: ClipSegment, fps: float = CAPTION_FPS) -> ClipCaption:
    return ClipCaption(clip, UNCAPTIONED, "no caption available for this clip", fps, (UNCAPTIONED,))


def caption_clip(
    clip: ClipSegment,
    video: VideoSource,
    client: PerceptionClient,
    target_fps: float = CAPTION_FPS,
    max_retries: int = 2,
) -> ClipCaption:
    """Caption one clip from frames downsampled to ``target_fps``.

    Unrecoverable client failures yield a placeholder caption flagged
    ``uncaptioned``.
    """
    frames = downsample_frames(clip.start, clip.end, clip.fps, target_fps)
    used_fps = min(clip.fps, target_fps)
    request = PerceptionRequest(
        task="caption",
        prompt=prompts.render(
            "caption", n_frames=len(frames), fps=f"{used_fps:g}", start=clip.start, end=clip.end, animal=clip.animal
        ),
        attachments=[Attachment(video.frame_ref(clip.animal, f), role="frame", caption=f"frame {f}") for f in frames],
        schema_id="caption/v1",
        max_retries=max_retries,
        context={"animal": clip.animal, "clip_id": clip.clip_id, "start": clip.start, "end": clip.end},
        validator=_caption_validator,
    )
    try:
        response = client.call(request)
    except (ClientSchemaError, ClientUnavailable):
        return uncaptioned(clip, used_fps)
    return ClipCaption(clip, response.payload["label"].strip(), response.payload["description"].strip(), used_fps)


def caption_clips(
    clips: Sequence[ClipSegment],
    video: VideoSource,
    client: PerceptionClient,
    workers: int = 1,
    **kwargs: Any,
) -> list[ClipCaption]:
    if workers <= 1:
        return [caption_clip(c, video, client, **kwargs) for c in clips]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: caption_clip(c, video, client, **kwargs), clips))


# -- merging -----------------------------------------------------------------


def check_grouping(groups: Sequence[Sequence[str]], clip_ids: Sequence[str]) -> str | None:
    """Describe the first structural violation of ``groups`` over ordered ``clip_ids``, or None."""
    position = {cid: i for i, cid in enumerate(clip_ids)}
    seen: set[str] = set()
    last = -1
    for g, members in enumerate(groups):
        unknown = [c for c in members if c not in position]
        if unknown:
            return f"group {g} names unknown clip {unknown[0]!r}"
        for c in members:
            if c in seen:
                return f"overlap: clip {c!r} appears in more than one group"
            seen.add(c)
        idx = [position[c] for c in members]
        if idx != list(range(idx[0], idx[0] + len(idx))):
            return f"non-consecutive: group {g} must list consecutive clips in temporal order"
        if idx[0] != last + 1:
            skipped = clip_ids[last + 1]
            if any(skipped in later for later in groups[g + 1 :]):
                return f"non-consecutive: group {g} is out of temporal order"
            return f"gap: clip {skipped!r} is not in any group"
        last = idx[-1]
    if last != len(clip_ids) - 1:
        return f"gap: clip {clip_ids[last + 1]!r} is not in any group"
    return None


def label_groups(captions: Sequence[ClipCaption]) -> list[list[int]]:
    """Group adjacent captions with identical labels."""
    groups: list[list[int]] = []
    for i, cap in enumerate(captions):
        if groups and captions[groups[-1][-1]].label == cap.label:
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def _segment(animal: str, members: Sequence[ClipCaption], label: str, description: str, flags=()) -> MergedSegment:
    return MergedSegment(
        animal, members[0].clip.start, members[-1].clip.end, label, description, tuple(members), tuple(flags)
    )


def fallback_merge(captions: Sequence[ClipCaption]) -> list[MergedSegment]:
    out = []
    for g in label_groups(captions):
        members = [captions[i] for i in g]
        desc = " ".join(dict.fromkeys(c.description for c in members))
        out.append(_segment(members[0].clip.animal, members, members[0].label, desc, ("merge-fallback",)))
    return out


def split_epochs(captions: Sequence[ClipCaption], epoch_seconds: float = EPOCH_SECONDS) -> list[list[int]]:
    """Chunks of about ``epoch_seconds`` of clips; consecutive chunks share one clip."""
    n = len(captions)
    if n == 0:
        return []
    epochs, start = [], 0
    while True:
        end, dur = start, 0.0
        while end < n and (dur < epoch_seconds or end - start < 2):
            dur += captions[end].clip.duration
            end += 1
        epochs.append(list(range(start, end)))
        if end >= n:
            return epochs
        start = end - 1


def _merge_epoch(
    animal: str, captions: Sequence[ClipCaption], client: PerceptionClient | None, max_retries: int
) -> list[MergedSegment]:
    ids = [c.clip.clip_id for c in captions]
    if client is None:
        return fallback_merge(captions)
    lines = "\n".join(
        f"- {c.clip.clip_id} (frames {c.clip.start}-{c.clip.end}): {c.label}. {c.description}" for c in captions
    )
    request = PerceptionRequest(
        task="merge",
        prompt=prompts.render("merge", animal=animal, clips=lines),
        attachments=[],
        schema_id="merge/v1",
        max_retries=max_retries,
        context={
            "animal": animal,
            "clips": [
                {"clip_id": c.clip.clip_id, "start": c.clip.start, "end": c.clip.end, "label": c.label} for c in captions
            ],
        },
        validator=lambda payload: check_grouping([s["clips"] for s in payload["segments"]], ids),
    )
    try:
        response = client.call(request)
    except (ClientSchemaError, ClientUnavailable):
        return fallback_merge(captions)
    by_id = {c.clip.clip_id: c for c in captions}
    return [
        _segment(animal, [by_id[c] for c in s["clips"]], s["label"].strip(), s["description"].strip())
        for s in response.payload["segments"]
    ]


def _join(a: MergedSegment, b: MergedSegment) -> MergedSegment:
    """Fuse two segments sharing their boundary clip; the longer one names the result."""
    members = a.clips + b.clips[1:]
    named = a if a.n_frames >= b.n_frames else b
    desc = a.description if a.description == b.description else f"{a.description} {b.description}"
    flags = tuple(dict.fromkeys(a.flags + b.flags))
    return _segment(a.animal, members, named.label, desc, flags)


def merge_segments(
    captions: Sequence[ClipCaption],
    client: PerceptionClient | None,
    epoch_seconds: float = EPOCH_SECONDS,
    max_retries: int = 2,
) -> list[MergedSegment]:
    """Merge one animal's ordered clip captions into consecutive behavioral segments.

    Captions are sent in epochs of about ``epoch_seconds``; neighbouring epochs
    share one clip and the two segments containing it are fused. Invalid
    groupings are re-prompted with the violation; if the client still fails,
    adjacent clips with equal labels are grouped and the segments flagged.
    With ``client=None`` only the label-equality grouping is used.
    """
    if not captions:
        return []
    animal = captions[0].clip.animal
    for prev, cur in zip(captions, captions[1:]):
        if cur.clip.animal != animal:
            raise ValidationError(f"merge_segments: mixed animals {animal!r} and {cur.clip.animal!r}")
        if cur.clip.start != prev.clip.end:
            raise ValidationError(f"{animal}: captions are not temporally ordered and contiguous at {prev.clip.clip_id}")
    merged: list[MergedSegment] = []
    for epoch in split_epochs(captions, epoch_seconds):
        segs = _merge_epoch(animal, [captions[i] for i in epoch], client, max_retries)
        if merged:
            segs[0] = _join(merged.pop(), segs[0])
        merged.extend(segs)
    return merged


# -- timeline ----------------------------------------------------------------


@dataclass
class BehaviorTimeline:
    animals: dict[str, list[MergedSegment]]
    n_frames: dict[str, int]
    fps: dict[str, float]
    session: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        for animal, segs in self.animals.items():
            if not segs:
                raise ValidationError(f"{animal}: non-covering: no segments", key="non-covering")
            pos, seen = 0, set()
            for seg in segs:
                if seg.animal != animal:
                    raise ValidationError(f"{animal}: segment of animal {seg.animal!r} in its list", key="animal")
                if seg.start > pos:
                    raise ValidationError(f"{animal}: non-covering: gap at frame {pos}", key="non-covering")
                if seg.start < pos:
                    raise ValidationError(f"{animal}: overlap at frame {seg.start}", key="overlap")
                if not seg.clips or seg.clips[0].clip.start != seg.start or seg.clips[-1].clip.end != seg.end:
                    raise ValidationError(f"{animal}: lineage: segment {seg.start}-{seg.end} != union of its clips", key="lineage")
                for a, b in zip(seg.clips, seg.clips[1:]):
                    if a.clip.end != b.clip.start:
                        raise ValidationError(f"{animal}: lineage: clips {a.clip.clip_id} and {b.clip.clip_id} not consecutive", key="lineage")
                for c in seg.clips:
                    if c.clip.clip_id in seen:
                        raise ValidationError(f"{animal}: lineage: clip {c.clip.clip_id} in two segments", key="lineage")
                    seen.add(c.clip.clip_id)
                pos = seg.end
            if pos != self.n_frames[animal]:
                raise ValidationError(f"{animal}: non-covering: ends at {pos}, expected {self.n_frames[animal]}", key="non-covering")

    # documents
    def to_dict(self) -> dict[str, Any]:
        def clip_doc(c: ClipCaption) -> dict[str, Any]:
            return {
                "clip_id": c.clip.clip_id,
                "start": c.clip.start,
                "end": c.clip.end,
                "cluster": c.clip.cluster,
                "label": c.label,
                "description": c.description,
                "caption_fps": c.fps,
                "flags": list(c.flags),
            }

        return {
            "version": TIMELINE_VERSION,
            "session": self.session,
            "animals": {
                a: {
                    "n_frames": self.n_frames[a],
                    "fps": self.fps[a],
                    "segments": [
                        {
                            "start": s.start,
                            "end": s.end,
                            "label": s.label,
                            "description": s.description,
                            "flags": list(s.flags),
                            "clips": [clip_doc(c) for c in s.clips],
                        }
                        for s in segs
                    ],
                }
                for a, segs in self.animals.items()
            },
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "BehaviorTimeline":
        if doc.get("version") != TIMELINE_VERSION:
            raise ValidationError(f"unsupported timeline version {doc.get('version')!r}", key="version")
        animals, n_frames, fps = {}, {}, {}
        for a, body in doc["animals"].items():
            n_frames[a], fps[a] = int(body["n_frames"]), float(body["fps"])
            segs = []
            for s in body["segments"]:
                clips = tuple(
                    ClipCaption(
                        ClipSegment(a, c["start"], c["end"], c["cluster"], fps[a], c["clip_id"]),
                        c["label"],
                        c["description"],
                        c["caption_fps"],
                        tuple(c["flags"]),
                    )
                    for c in s["clips"]
                )
                segs.append(MergedSegment(a, s["start"], s["end"], s["label"], s["description"], clips, tuple(s["flags"])))
            animals[a] = segs
        timeline = cls(animals, n_frames, fps, dict(doc.get("session", {})))
        timeline.validate()
        return timeline

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "BehaviorTimeline":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table_rows(self) -> list[list[Any]]:
        rows = []
        for a, segs in self.animals.items():
            for s in segs:
                rows.append(
                    [
                        a,
                        s.start,
                        s.end,
                        round(s.start / self.fps[a], 6),
                        round(s.end / self.fps[a], 6),
                        s.label,
                        s.description,
                        ";".join(s.clip_ids),
                        ";".join(map(str, s.clusters)),
                        ";".join(s.flags),
                    ]
                )
        return rows

    def save_table(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_HEADER)
            w.writerows(self.table_rows())


def build_timeline(
    merged: Mapping[str, Sequence[MergedSegment]],
    n_frames: Mapping[str, int] | None = None,
    session: Mapping[str, Any] | None = None,
) -> BehaviorTimeline:
    """Assemble and validate the per-animal timeline.

    ``n_frames`` defaults to the end of each animal's last segment.
    """
    animals = {a: list(segs) for a, segs in merged.items()}
    lengths = dict(n_frames) if n_frames is not None else {a: (s[-1].end if s else 0) for a, s in animals.items()}
    fps = {a: (s[0].clips[0].clip.fps if s and s[0].clips else CAPTION_FPS) for a, s in animals.items()}
    timeline = BehaviorTimeline(animals, lengths, fps, dict(session or {}))
    timeline.validate()
    return timeline


def group_accuracy(timeline: BehaviorTimeline, key: Callable[[ClipSegment], str]) -> bool:
    """True when merged groups coincide with the grouping of consecutive clips by ``key``."""
    for segs in timeline.animals.values():
        got = [s.clip_ids for s in segs]
        clips = [c for s in segs for c in s.clips]
        want: list[list[str]] = []
        last = None
        for c in clips:
            k = key(c.clip)
            if k != last:
                want.append([])
                last = k
            want[-1].append(c.clip.clip_id)
        if [list(g) for g in got] != want:
            return False
    return True


def duration_histogram(timeline: BehaviorTimeline, edges: Sequence[float]) -> dict[str, np.ndarray]:
    """Counts of merged-segment durations (seconds) per animal over ``edges``."""
    return {
        a: np.histogram([s.n_frames / timeline.fps[a] for s in segs], bins=np.asarray(edges, dtype=float))[0]
        for a, segs in timeline.animals.items()
    }
