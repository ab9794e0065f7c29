"""Summary tables for finished runs."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .behavior.semantics import BehaviorTimeline, duration_histogram
from .pose import io as pio
from .pose.model import KEYPOINTS

POSE_COLUMNS = ["keypoint", "n", "mean_3d_error_mm", "median_3d_error_mm", "mean_reproj_px", "flagged"]
DEFAULT_EDGES = (0.0, 1.0, 2.0, 5.0, 10.0, 30.0, 60.0, float("inf"))


def pose_table(run: Path, truth: Path | None = None) -> list[dict]:
    """One row per keypoint plus an ``all`` row.

    3D error columns need the simulator's ``truth/points.csv``; they are NaN
    without it.
    """
    traj = pio.read_trajectories(run / "trajectories.csv")
    points = pio.read_truth_points(truth / "points.csv") if truth is not None else {}
    flagged: dict[str, int] = defaultdict(int)
    with open(run / "qc.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["verdict"] == "flag" and row["keypoint"] != "*":
                flagged[row["keypoint"]] += 1
    err3d: dict[str, list[float]] = defaultdict(list)
    reproj: dict[str, list[float]] = defaultdict(list)
    for frame, kps in traj.items():
        for kp, rec in kps.items():
            reproj[kp].append(rec["mean_error"])
            if frame in points:
                err3d[kp].append(float(np.linalg.norm(rec["point"] - points[frame][KEYPOINTS.index(kp)])))

    def row(name: str, e3: list[float], rp: list[float], nflag: int) -> dict:
        return {
            "keypoint": name,
            "n": len(rp),
            "mean_3d_error_mm": float(np.mean(e3)) if e3 else float("nan"),
            "median_3d_error_mm": float(np.median(e3)) if e3 else float("nan"),
            "mean_reproj_px": float(np.mean(rp)) if rp else float("nan"),
            "flagged": nflag,
        }

    rows = [row(kp, err3d[kp], reproj[kp], flagged[kp]) for kp in KEYPOINTS]
    rows.append(
        row(
            "all",
            [e for kp in KEYPOINTS for e in err3d[kp]],
            [e for kp in KEYPOINTS for e in reproj[kp]],
            sum(flagged.values()),
        )
    )
    return rows


def behavior_table(timeline: BehaviorTimeline, edges: Sequence[float] = DEFAULT_EDGES) -> list[dict]:
    """Merged-segment duration histogram per animal, one row per bin."""
    hist = duration_histogram(timeline, edges)
    rows = []
    for animal, counts in hist.items():
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            rows.append({"animal": animal, "min_s": lo, "max_s": hi, "segments": int(n)})
    return rows


def write_table(rows: Sequence[dict], path: Path) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return "(empty)"
    cols = list(rows[0])

    def fmt(v) -> str:
        return f"{v:.3f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
