"""Run-length segmentation of per-frame cluster labels into candidate clips."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ValidationError
from .dec import DecModel, FeatureSequence


@dataclass(frozen=True)
class ClipSegment:
    """Frames ``[start, end)`` of one animal sharing a cluster id."""

    animal: str
    start: int
    end: int
    cluster: int
    fps: float
    clip_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.end - self.start

    @property
    def duration(self) -> float:
        return (self.end - self.start) / self.fps


def runs_from_labels(labels: Sequence[int]) -> list[tuple[int, int, int]]:
    """``(start, end, label)`` for each maximal run of equal labels."""
    lab = np.asarray(labels)
    if lab.size == 0:
        return []
    cuts = np.flatnonzero(lab[1:] != lab[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [lab.size]])
    return [(int(s), int(e), int(lab[s])) for s, e in zip(starts, ends)]


def labels_from_runs(runs: Sequence[tuple[int, int, int]]) -> np.ndarray:
    out = np.empty(runs[-1][1] if runs else 0, dtype=int)
    for s, e, lab in runs:
        out[s:e] = lab
    return out


def absorb_short_runs(runs: list[tuple[int, int, int]], min_frames: float) -> list[tuple[int, int, int]]:
    """Merge runs shorter than ``min_frames`` into their longer neighbour.

    The shortest offending run is handled first (earliest on ties). The first
    run can only merge forward and the last only backward; between equally
    long neighbours the earlier one wins.
    """
    runs = list(runs)
    while len(runs) > 1:
        short = [i for i, (s, e, _) in enumerate(runs) if e - s < min_frames]
        if not short:
            break
        i = min(short, key=lambda j: (runs[j][1] - runs[j][0], j))
        if i == 0:
            target = 1
        elif i == len(runs) - 1:
            target = i - 1
        else:
            prev_len = runs[i - 1][1] - runs[i - 1][0]
            next_len = runs[i + 1][1] - runs[i + 1][0]
            target = i + 1 if next_len > prev_len else i - 1
        s, e, _ = runs[i]
        runs[i] = (s, e, runs[target][2])
        runs = runs_from_labels(labels_from_runs(runs))
    return runs


def segments_from_labels(
    animal: str, labels: Sequence[int], fps: float, min_duration: float = 0.0
) -> list[ClipSegment]:
    runs = absorb_short_runs(runs_from_labels(labels), min_duration * fps)
    return [
        ClipSegment(animal, s, e, lab, fps, clip_id=f"{animal}:{i}") for i, (s, e, lab) in enumerate(runs)
    ]


def segment_extract(
    sequence: FeatureSequence, model: DecModel, min_duration: float = 0.5
) -> list[ClipSegment]:
    """Cut one animal's sequence at changes of its hard cluster label.

    ``min_duration`` is in seconds; shorter runs are absorbed into a neighbour.
    """
    if min_duration < 0:
        raise ValueError("min_duration must be non-negative")
    return segments_from_labels(sequence.animal, model.predict(sequence.features), sequence.fps, min_duration)


def check_partition(segments: Sequence[ClipSegment], n_frames: int) -> None:
    """Raise unless ``segments`` are sorted, non-overlapping and cover ``[0, n_frames)``."""
    pos = 0
    for seg in segments:
        if seg.start != pos:
            kind = "overlap" if seg.start < pos else "gap"
            raise ValidationError(f"{seg.animal}: {kind} at frame {pos}")
        if seg.end <= seg.start:
            raise ValidationError(f"{seg.animal}: empty segment at frame {seg.start}")
        pos = seg.end
    if pos != n_frames:
        raise ValidationError(f"segments end at {pos}, expected {n_frames}")
