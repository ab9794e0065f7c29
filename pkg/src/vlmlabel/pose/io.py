"""Line-oriented file formats of the pose pipeline.

Inputs (CSV with header)
    centroids.csv   frame,view,index,x,y
    bboxes.csv      frame,view,x0,y0,x1,y1          body box from the mask detector
    seeds.csv       frame,view,keypoint,index       empty index = unassigned
    images.csv      frame,view,path                 optional reflectance images

Outputs (run directory)
    assignments.csv   frame,view,keypoint,index,provenance,flags
    regions.csv       frame,view,region,x0,y0,x1,y1
    trajectories.csv  frame,keypoint,x,y,z,mean_error,inliers
    errors.csv        frame,keypoint,view,error            per-view reprojection error
    qc.csv            frame,keypoint,verdict,reason       keypoint "*" = whole frame
    refine_log.jsonl  one JSON object per examined target camera
    manifest.json     {"version": 1, "completed": [frame, ...], "window": [frame, frame, frame]}
    config.effective.json   every effective setting of the run

Ground truth written by the simulator (truth/ directory)
    assignments.csv   frame,view,keypoint,index
    points.csv        frame,keypoint,x,y,z
    pixels.csv        frame,view,keypoint,x,y
"""

from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..clients.oracle import PoseTruth
from ..errors import ConfigError, ValidationError
from ..geometry import CameraModel
from .model import KEYPOINTS, REGIONS, AssignmentState, FrameObservation, Rect, WindowEntry
from .pipeline import FrameResult

ASSIGNMENT_HEADER = ["frame", "view", "keypoint", "index", "provenance", "flags"]
REGION_HEADER = ["frame", "view", "region", "x0", "y0", "x1", "y1"]
TRAJECTORY_HEADER = ["frame", "keypoint", "x", "y", "z", "mean_error", "inliers"]
QC_HEADER = ["frame", "keypoint", "verdict", "reason"]
ERROR_HEADER = ["frame", "keypoint", "view", "error"]
OUTPUT_FILES = ("assignments.csv", "regions.csv", "trajectories.csv", "errors.csv", "qc.csv", "refine_log.jsonl")

Frame = dict[str, FrameObservation]


def _read_csv(path: Path, required: Sequence[str]) -> list[dict[str, str]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in required if c not in (reader.fieldnames or [])]
            if missing:
                raise ConfigError(f"{path.name}: missing column {missing[0]!r}", key=missing[0])
            return list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}", key=path.name) from exc


def _index(text: str) -> int | None:
    return None if text.strip() in ("", "None", "null") else int(text)


def read_frames(
    centroids_path: Path,
    bboxes_path: Path,
    cameras: Mapping[str, CameraModel],
    images_path: Path | None = None,
) -> dict[int, Frame]:
    """Assemble per-frame, per-view observations from the input tables."""
    pts: dict[tuple[int, str], dict[int, tuple[float, float]]] = defaultdict(dict)
    for row in _read_csv(centroids_path, ["frame", "view", "index", "x", "y"]):
        key = (int(row["frame"]), row["view"])
        idx = int(row["index"])
        if idx in pts[key]:
            raise ValidationError(f"centroids: duplicate index {idx} in frame {key[0]} view {key[1]}")
        pts[key][idx] = (float(row["x"]), float(row["y"]))
    images: dict[tuple[int, str], str] = {}
    if images_path is not None:
        for row in _read_csv(images_path, ["frame", "view", "path"]):
            p = Path(row["path"])
            images[(int(row["frame"]), row["view"])] = str(p if p.is_absolute() else images_path.parent / p)
    frames: dict[int, Frame] = defaultdict(dict)
    for row in _read_csv(bboxes_path, ["frame", "view", "x0", "y0", "x1", "y1"]):
        frame, view = int(row["frame"]), row["view"]
        if view not in cameras:
            raise ValidationError(f"bboxes: unknown view {view!r}")
        found = pts.get((frame, view), {})
        if sorted(found) != list(range(len(found))):
            raise ValidationError(f"centroids: indices of frame {frame} view {view} are not 0..n-1")
        centroids = np.array([found[i] for i in range(len(found))]).reshape(-1, 2)
        frames[frame][view] = FrameObservation.build(
            frame,
            view,
            Rect(float(row["x0"]), float(row["y0"]), float(row["x1"]), float(row["y1"])),
            centroids,
            cameras[view].image_size,
            images.get((frame, view), f"frame://{view}/{frame:06d}"),
        )
    order = list(cameras)
    return {f: {v: frames[f][v] for v in order if v in frames[f]} for f in sorted(frames)}


def read_assignment_table(path: Path, views: Sequence[str]) -> dict[int, AssignmentState]:
    """Read ``frame,view,keypoint,index`` rows (seeds or truth) into states."""
    states: dict[int, AssignmentState] = {}
    for row in _read_csv(path, ["frame", "view", "keypoint", "index"]):
        frame = int(row["frame"])
        if row["keypoint"] not in KEYPOINTS:
            raise ValidationError(f"{path.name}: unknown keypoint {row['keypoint']!r}")
        if row["view"] not in views:
            raise ValidationError(f"{path.name}: unknown view {row['view']!r}")
        st = states.setdefault(frame, AssignmentState.empty(frame, views))
        st.set(row["view"], row["keypoint"], _index(row["index"]), row.get("provenance") or "seed")
        for flag in filter(None, (row.get("flags") or "").split(";")):
            st.flag(row["view"], row["keypoint"], flag)
    return states


def write_assignment_table(path: Path, states: Iterable[AssignmentState]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "view", "keypoint", "index"])
        for st in states:
            for view, kp, idx, _, _ in st.records():
                w.writerow([st.frame_index, view, kp, "" if idx is None else idx])


def load_seeds(path: Path, frames: Mapping[int, Frame], views: Sequence[str]):
    states = read_assignment_table(path, views)
    missing = [f for f in states if f not in frames]
    if missing:
        raise ValidationError(f"seed frame {missing[0]} has no observations")
    for st in states.values():
        st.check(frames[st.frame_index])
    return [(states[f], frames[f]) for f in sorted(states)]


# -- truth -------------------------------------------------------------------


def write_truth(directory: Path, truth: PoseTruth, views: Sequence[str]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "assignments.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "view", "keypoint", "index"])
        for f in sorted(truth.assignments):
            for v in views:
                for kp in KEYPOINTS:
                    idx = truth.assignments[f][v][kp]
                    w.writerow([f, v, kp, "" if idx is None else idx])
    with open(directory / "points.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "keypoint", "x", "y", "z"])
        for f in sorted(truth.points):
            for kp, p in zip(KEYPOINTS, truth.points[f]):
                w.writerow([f, kp, *map(float, p)])
    with open(directory / "pixels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "view", "keypoint", "x", "y"])
        for f in sorted(truth.pixels):
            for v in views:
                for kp, p in zip(KEYPOINTS, truth.pixels[f][v]):
                    w.writerow([f, v, kp, *map(float, p)])


def read_truth_points(path: Path) -> dict[int, np.ndarray]:
    points: dict[int, np.ndarray] = {}
    for row in _read_csv(path, ["frame", "keypoint", "x", "y", "z"]):
        arr = points.setdefault(int(row["frame"]), np.full((len(KEYPOINTS), 3), np.nan))
        arr[KEYPOINTS.index(row["keypoint"])] = [float(row["x"]), float(row["y"]), float(row["z"])]
    return points


def read_truth(directory: Path, views: Sequence[str], region_margin: float = 12.0) -> PoseTruth:
    states = read_assignment_table(directory / "assignments.csv", views)
    assignments = {f: st.views for f, st in states.items()}
    points = read_truth_points(directory / "points.csv")
    pixels: dict[int, dict[str, np.ndarray]] = {}
    for row in _read_csv(directory / "pixels.csv", ["frame", "view", "keypoint", "x", "y"]):
        per = pixels.setdefault(int(row["frame"]), {})
        arr = per.setdefault(row["view"], np.full((len(KEYPOINTS), 2), np.nan))
        arr[KEYPOINTS.index(row["keypoint"])] = [float(row["x"]), float(row["y"])]
    return PoseTruth(assignments, pixels, points, region_margin)


def write_observations(directory: Path, frames: Sequence[Frame]) -> None:
    with open(directory / "centroids.csv", "w", newline="") as fc, open(
        directory / "bboxes.csv", "w", newline=""
    ) as fb:
        wc, wb = csv.writer(fc, lineterminator="\n"), csv.writer(fb, lineterminator="\n")
        wc.writerow(["frame", "view", "index", "x", "y"])
        wb.writerow(["frame", "view", "x0", "y0", "x1", "y1"])
        for frame in frames:
            for view, obs in frame.items():
                wb.writerow([obs.frame_index, view, *obs.body_bbox.as_list()])
                for i, (x, y) in enumerate(obs.centroids):
                    wc.writerow([obs.frame_index, view, i, float(x), float(y)])


# -- run outputs -------------------------------------------------------------


class RunWriter:
    """Appends per-frame results and maintains the completion manifest.

    A frame counts as done only once the manifest lists it; on resume, output
    lines of frames missing from the manifest are discarded. The manifest also
    records which frames form the exemplar window after the last completed one.
    """

    def __init__(self, directory: Path, resume: bool = True) -> None:
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        self.completed: list[int] = []
        self.window: list[int] = []
        if resume and self.manifest_path.exists():
            doc = json.loads(self.manifest_path.read_text())
            if doc.get("version") != 1:
                raise ValidationError(f"unsupported manifest version in {self.manifest_path}")
            self.completed = [int(f) for f in doc.get("completed", [])]
            self.window = [int(f) for f in doc.get("window", [])]
            self._truncate(set(self.completed))
        else:
            self._start()

    @property
    def resumed(self) -> bool:
        return bool(self.completed)

    def _start(self) -> None:
        headers = {
            "assignments.csv": ASSIGNMENT_HEADER,
            "regions.csv": REGION_HEADER,
            "trajectories.csv": TRAJECTORY_HEADER,
            "errors.csv": ERROR_HEADER,
            "qc.csv": QC_HEADER,
        }
        for name, header in headers.items():
            with open(self.dir / name, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(header)
        (self.dir / "refine_log.jsonl").write_text("")
        self._write_manifest()

    def _truncate(self, keep: set[int]) -> None:
        for name in OUTPUT_FILES:
            path = self.dir / name
            if not path.exists():
                raise ValidationError(f"cannot resume: {path} is missing")
            # an unterminated last line is a write cut short by the interruption
            lines = [ln for ln in path.read_text().splitlines(keepends=True) if ln.endswith("\n")]
            if name.endswith(".jsonl"):
                kept = [ln for ln in lines if json.loads(ln)["frame"] in keep]
            else:
                kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) in keep]
            path.write_text("".join(kept))

    def _write_manifest(self) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        doc = {"version": 1, "completed": self.completed, "window": self.window}
        tmp.write_text(json.dumps(doc) + "\n")
        os.replace(tmp, self.manifest_path)

    def write(self, result: FrameResult, window: Sequence[int]) -> None:
        f = result.frame_index
        with open(self.dir / "assignments.csv", "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for view, kp, idx, prov, flags in result.state.records():
                w.writerow([f, view, kp, "" if idx is None else idx, prov, ";".join(flags)])
        with open(self.dir / "regions.csv", "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for view, boxes in result.regions.items():
                for region in REGIONS:
                    w.writerow([f, view, region, *boxes[region].as_list()])
        with open(self.dir / "trajectories.csv", "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for est in result.estimates:
                w.writerow([f, est.keypoint, *map(float, est.point), est.mean_inlier_error, ";".join(est.inlier_cameras)])
        with open(self.dir / "errors.csv", "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for est in result.estimates:
                for view in sorted(est.per_camera_error):
                    w.writerow([f, est.keypoint, view, est.per_camera_error[view]])
        with open(self.dir / "qc.csv", "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for v in result.qc:
                w.writerow([f, v.keypoint, v.verdict, v.reason])
        with open(self.dir / "refine_log.jsonl", "a") as fh:
            for entry in result.log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        self.completed.append(f)
        self.window = list(window)
        self._write_manifest()


def restore_window_entries(directory: Path, frames: Mapping[int, Frame], views: Sequence[str], wanted: Sequence[int]) -> list[WindowEntry]:
    """Rebuild window entries for completed frames from a run directory."""
    states = read_assignment_table(directory / "assignments.csv", views)
    regions: dict[int, dict[str, dict[str, Rect]]] = defaultdict(lambda: defaultdict(dict))
    for row in _read_csv(directory / "regions.csv", REGION_HEADER):
        regions[int(row["frame"])][row["view"]][row["region"]] = Rect(
            float(row["x0"]), float(row["y0"]), float(row["x1"]), float(row["y1"])
        )
    return [
        WindowEntry(f, states[f], dict(frames[f]), {v: dict(r) for v, r in regions[f].items()}) for f in wanted
    ]


def read_trajectories(path: Path) -> dict[int, dict[str, dict]]:
    out: dict[int, dict[str, dict]] = defaultdict(dict)
    for row in _read_csv(path, TRAJECTORY_HEADER):
        out[int(row["frame"])][row["keypoint"]] = {
            "point": np.array([float(row["x"]), float(row["y"]), float(row["z"])]),
            "mean_error": float(row["mean_error"]),
            "inliers": [c for c in row["inliers"].split(";") if c],
        }
    return dict(out)
