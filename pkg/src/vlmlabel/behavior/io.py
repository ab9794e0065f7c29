"""File formats of the behavior pipeline.

features.npz    ``animals`` (names), ``fps`` (per animal), ``features_<i>`` (T x D per animal)
segments.csv    animal,clip_id,start,end,cluster,fps      (also used for planted truth)
model.npz       ``centroids``, ``alpha``, ``seed``, ``trace``, ``reinits``, optional ``encoder``
captions.jsonl  one caption per line: clip fields plus label, description, fps, flags
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ConfigError, ValidationError
from .dec import DecModel, FeatureSequence
from .segments import ClipSegment
from .semantics import ClipCaption

SEGMENT_HEADER = ["animal", "clip_id", "start", "end", "cluster", "fps"]


def save_features(path: str | Path, sequences: Sequence[FeatureSequence]) -> None:
    arrays = {f"features_{i}": s.features for i, s in enumerate(sequences)}
    np.savez(
        path,
        animals=np.array([s.animal for s in sequences]),
        fps=np.array([s.fps for s in sequences], dtype=float),
        **arrays,
    )


def load_features(path: str | Path) -> list[FeatureSequence]:
    try:
        with np.load(path) as data:
            animals = [str(a) for a in data["animals"]]
            fps = data["fps"]
            return [FeatureSequence(a, float(fps[i]), data[f"features_{i}"]) for i, a in enumerate(animals)]
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read features {path}: {exc}", key="features") from exc


def save_segments(path: str | Path, segments: Iterable[ClipSegment]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SEGMENT_HEADER)
        for s in segments:
            w.writerow([s.animal, s.clip_id, s.start, s.end, s.cluster, repr(float(s.fps))])


def load_segments(path: str | Path) -> list[ClipSegment]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read segments {path}: {exc}", key=str(path)) from exc
    out = []
    for row in rows:
        missing = [c for c in SEGMENT_HEADER if c not in row]
        if missing:
            raise ConfigError(f"{path}: missing column {missing[0]!r}", key=missing[0])
        out.append(
            ClipSegment(row["animal"], int(row["start"]), int(row["end"]), int(row["cluster"]), float(row["fps"]), row["clip_id"])
        )
    return out


def by_animal(segments: Iterable[ClipSegment]) -> dict[str, list[ClipSegment]]:
    out: dict[str, list[ClipSegment]] = {}
    for s in segments:
        out.setdefault(s.animal, []).append(s)
    for segs in out.values():
        segs.sort(key=lambda s: s.start)
    return out


def save_model(path: str | Path, model: DecModel) -> None:
    extra = {} if model.encoder is None else {"encoder": model.encoder}
    np.savez(
        path,
        centroids=model.centroids,
        alpha=np.float64(model.alpha),
        seed=np.int64(model.seed),
        trace=np.asarray(model.trace, dtype=float),
        reinits=np.int64(model.reinits),
        **extra,
    )


def load_model(path: str | Path) -> DecModel:
    with np.load(path) as data:
        return DecModel(
            centroids=data["centroids"],
            alpha=float(data["alpha"]),
            trace=[float(v) for v in data["trace"]],
            seed=int(data["seed"]),
            encoder=data["encoder"] if "encoder" in data else None,
            reinits=int(data["reinits"]),
        )


def caption_record(c: ClipCaption) -> dict:
    s = c.clip
    return {
        "animal": s.animal,
        "clip_id": s.clip_id,
        "start": s.start,
        "end": s.end,
        "cluster": s.cluster,
        "clip_fps": s.fps,
        "label": c.label,
        "description": c.description,
        "fps": c.fps,
        "flags": list(c.flags),
    }


def caption_from_record(r: dict) -> ClipCaption:
    clip = ClipSegment(r["animal"], r["start"], r["end"], r["cluster"], r["clip_fps"], r["clip_id"])
    return ClipCaption(clip, r["label"], r["description"], r["fps"], tuple(r["flags"]))


def read_captions(path: str | Path) -> list[ClipCaption]:
    """Read a captions log; a truncated final line (interrupted write) is ignored."""
    path = Path(path)
    if not path.exists():
        return []
    out = []
    lines = path.read_text().splitlines()
    for i, line in enumerate(lines):
        try:
            out.append(caption_from_record(json.loads(line)))
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise ValidationError(f"{path}: corrupt line {i + 1}") from None
    return out


def append_caption(path: str | Path, caption: ClipCaption) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(caption_record(caption), sort_keys=True) + "\n")
