"""Config-driven runs of the pose and behavior pipelines, with resumable outputs."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Sequence

from . import config as cfg
from .behavior import io as bio
from .behavior.dec import dec_fit
from .behavior.segments import ClipSegment, segment_extract
from .behavior.semantics import (
    BehaviorTimeline,
    ClipCaption,
    VideoSource,
    build_timeline,
    caption_clip,
    merge_segments,
)
from .clients.base import PerceptionClient
from .clients.oracle import BehaviorTruth, CorruptionSpec, OracleClient, UnavailableClient
from .consensus import Keypoint3DEstimate, QCVerdict, RansacConfig, RefineConfig, merge_verdicts, qc_filter
from .errors import ConfigError
from .geometry import load_calibration
from .pose import io as pio
from .pose.model import RollingWindow, WindowEntry, region_boxes_from_assignment
from .pose.pipeline import FrameResult, PoseConfig, run_sequence, seed_window, window_positions

log = logging.getLogger(__name__)


def make_client(section: cfg.ClientSection, views: Sequence[str] = (), region_margin: float = 12.0) -> PerceptionClient:
    """Build the perception client named by ``section.kind``."""
    if section.kind == "unavailable":
        return UnavailableClient()
    if section.kind == "live":
        from .clients.live import LiveClient, LiveConfig

        live = section.live
        if not live.endpoint or not live.model:
            raise ConfigError("client.live.endpoint and client.live.model are required", key="client.live.endpoint")
        return LiveClient(LiveConfig(**vars(live)))
    if section.kind != "oracle":
        raise ConfigError(f"client.kind must be oracle, live or unavailable, got {section.kind!r}", key="client.kind")
    pose = pio.read_truth(Path(section.truth), views, region_margin) if section.truth else None
    behavior = BehaviorTruth(bio.load_segments(section.planted)) if section.planted else None
    if pose is None and behavior is None:
        raise ConfigError("oracle client needs client.truth or client.planted", key="client.truth")
    try:
        corruption = CorruptionSpec(**vars(section.corruption))
    except ValueError as exc:
        raise ConfigError(str(exc), key="client.corruption") from exc
    return OracleClient(pose, behavior, corruption, seed=section.seed)


def pose_config(c: cfg.PoseRunConfig) -> PoseConfig:
    try:
        ransac = RansacConfig(
            tau_reproj=c.thresholds.tau_reproj,
            max_subset_size=c.ransac.max_subset_size,
            iterations=c.ransac.iterations,
            seed=c.ransac.seed,
            exhaustive=c.ransac.exhaustive,
        )
        refine = RefineConfig(ransac, radius=c.thresholds.radius, tau_qc=c.thresholds.tau_qc, max_passes=c.pipeline.max_passes)
        return PoseConfig(
            ablation=c.ablation,
            refine=refine,
            max_retries=c.pipeline.max_retries,
            workers=c.pipeline.workers,
            strict_window=c.pipeline.strict_window,
            region_margin=c.pipeline.region_margin,
            max_consecutive_unavailable=c.pipeline.max_consecutive_unavailable,
            max_step_mm=c.thresholds.max_step_mm,
        )
    except ValueError as exc:
        key = "ablation" if "ablation" in str(exc) else "thresholds"
        raise ConfigError(str(exc), key=key) from exc


def _provenance_view(doc: dict) -> dict:
    # settings that may differ between an interrupted run and its resumption
    doc = json.loads(json.dumps(doc))
    doc["pipeline"].pop("max_frames", None)
    doc["pipeline"].pop("workers", None)
    return doc


def run_pose(c: cfg.PoseRunConfig, client: PerceptionClient | None = None, resume: bool = True) -> list[FrameResult]:
    """Run the pose pipeline described by ``c`` into ``c.output``.

    With ``resume`` an existing run directory is continued after its last
    completed frame; its recorded settings must match ``c``.
    """
    pconf = pose_config(c)
    cameras = {cam.name: cam for cam in load_calibration(c.calibration)}
    views = list(cameras)
    images = Path(c.inputs.images) if c.inputs.images else None
    frames = pio.read_frames(Path(c.inputs.centroids), Path(c.inputs.bboxes), cameras, images)
    seeds = pio.load_seeds(Path(c.inputs.seeds), frames, views)
    if client is None:
        client = make_client(c.client, views, pconf.region_margin)

    out = Path(c.output)
    eff = cfg.effective(c)
    eff_path = out / "config.effective.json"
    writer_exists = (out / "manifest.json").exists() and resume
    if writer_exists and eff_path.exists():
        if _provenance_view(json.loads(eff_path.read_text())) != _provenance_view(eff):
            raise ConfigError(f"{out} holds a run with different settings; choose another output", key="output")
    writer = pio.RunWriter(out, resume=resume)
    eff_path.write_text(json.dumps(eff, indent=2, sort_keys=True) + "\n")

    seed_frames = [s.frame_index for s, _ in seeds]
    todo = [f for f in frames if f > max(seed_frames)]
    if c.pipeline.max_frames is not None:
        todo = todo[: c.pipeline.max_frames]
    done = set(writer.completed)
    remaining = [f for f in todo if f not in done]

    window = None
    reference = None
    if writer.resumed:
        if pconf.max_step_mm:
            reference = _motion_reference(out, seed_window(seeds, pconf.region_margin), cameras, pconf)
        seed_states = {s.frame_index: s for s, _ in seeds}
        restored = {
            e.frame_index: e
            for e in pio.restore_window_entries(out, frames, views, [f for f in writer.window if f not in seed_states])
        }
        entries = []
        for f in writer.window:
            if f in seed_states:
                st = seed_states[f]
                entries.append(WindowEntry(f, st, dict(frames[f]), region_boxes_from_assignment(st, frames[f], pconf.region_margin)))
            else:
                entries.append(restored[f])
        window = RollingWindow(entries)
        log.info("resuming %s after %d completed frames", out, len(done))

    if window is None:
        window = seed_window(seeds, pconf.region_margin)

    def on_frame(result: FrameResult) -> None:
        writer.write(result, window.frame_indices)

    return run_sequence(
        [frames[f] for f in remaining], None, cameras, pconf, client, on_frame=on_frame, window=window, motion_reference=reference
    )


def _motion_reference(run: Path, seeds: RollingWindow, cameras, pconf: PoseConfig) -> dict:
    """Last accepted 3D position per keypoint, as an uninterrupted run would hold it."""
    reference = window_positions(seeds, cameras, pconf.refine.ransac.tau_reproj)
    accepted: dict[int, set[str]] = defaultdict(set)
    with open(run / "qc.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["verdict"] == "accept":
                accepted[int(row["frame"])].add(row["keypoint"])
    for f, kps in sorted(pio.read_trajectories(run / "trajectories.csv").items()):
        for kp, rec in kps.items():
            if kp in accepted[f]:
                reference[kp] = (f, rec["point"])
    return reference


# -- QC re-filtering ---------------------------------------------------------


def read_estimates(run: Path) -> tuple[dict[int, list[Keypoint3DEstimate]], dict[int, dict[str, str]], dict[int, list[QCVerdict]]]:
    """Estimates, triangulation failures and stored QC rows of a run directory.

    The third item holds every stored QC row per frame, so checks that need
    more than one frame (motion jumps) survive re-filtering.
    """
    per_view: dict[tuple[int, str], dict[str, float]] = defaultdict(dict)
    with open(run / "errors.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            per_view[(int(row["frame"]), row["keypoint"])][row["view"]] = float(row["error"])
    estimates: dict[int, list[Keypoint3DEstimate]] = defaultdict(list)
    for frame, kps in pio.read_trajectories(run / "trajectories.csv").items():
        for kp, rec in kps.items():
            estimates[frame].append(
                Keypoint3DEstimate(kp, rec["point"], tuple(rec["inliers"]), per_view[(frame, kp)], rec["mean_error"])
            )
    failed: dict[int, dict[str, str]] = defaultdict(dict)
    frame_rows: dict[int, list[QCVerdict]] = defaultdict(list)
    with open(run / "qc.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            f = int(row["frame"])
            if row["reason"] in ("no-consensus", "insufficient-views"):
                failed[f][row["keypoint"]] = row["reason"]
            else:
                frame_rows[f].append(QCVerdict(row["keypoint"], row["verdict"], row["reason"]))
    return dict(estimates), dict(failed), dict(frame_rows)


def requalify(run: Path, tau_qc: float) -> tuple[int, int, Path]:
    """Re-filter a finished run at ``tau_qc``; writes ``review.csv`` with flagged labels only.

    Returns ``(n_flagged, n_total, path)``.
    """
    estimates, failed, frame_rows = read_estimates(run)
    frames = sorted(set(estimates) | set(failed) | set(frame_rows))
    path = run / "review.csv"
    n_flag = n_total = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "keypoint", "verdict", "reason", "tau_qc"])
        for f in frames:
            stored = frame_rows.get(f, [])
            jumps = {v.keypoint: [r for r in v.reason.split(";") if r.startswith("jump:")] for v in stored}
            rows = merge_verdicts(qc_filter(estimates.get(f, []), tau_qc, failed.get(f, {})), jumps)
            rows += [v for v in stored if v.keypoint == "*"]
            for v in rows:
                if v.keypoint != "*":
                    n_total += 1
                if v.verdict == "flag":
                    n_flag += v.keypoint != "*"
                    w.writerow([f, v.keypoint, v.verdict, v.reason, tau_qc])
    return n_flag, n_total, path


# -- behavior ----------------------------------------------------------------


def behavior_cluster(c: cfg.BehaviorRunConfig) -> list[ClipSegment]:
    seqs = bio.load_features(c.features)
    out = Path(c.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model = dec_fit(seqs, k=c.dec.k, epochs=c.dec.epochs, seed=c.dec.seed, alpha=c.dec.alpha, learning_rate=c.dec.learning_rate)
    except ValueError as exc:
        raise ConfigError(str(exc), key="dec.k") from exc
    bio.save_model(out / "model.npz", model)
    clips = [seg for s in seqs for seg in segment_extract(s, model, c.dec.min_duration)]
    bio.save_segments(out / "segments.csv", clips)
    return clips


def behavior_caption(c: cfg.BehaviorRunConfig, client: PerceptionClient | None = None) -> list[ClipCaption]:
    """Caption every clip of ``segments.csv``; clips already in ``captions.jsonl`` are skipped."""
    out = Path(c.output)
    clips = bio.load_segments(out / "segments.csv")
    path = out / "captions.jsonl"
    done = bio.read_captions(path)
    # drop an interrupted trailing write before appending
    path.write_text("".join(json.dumps(bio.caption_record(x), sort_keys=True) + "\n" for x in done))
    have = {x.clip.clip_id for x in done}
    if client is None:
        client = make_client(c.client)
    video = VideoSource(c.caption.video)
    todo = [clip for clip in clips if clip.clip_id not in have]
    from concurrent.futures import ThreadPoolExecutor

    def one(clip: ClipSegment) -> ClipCaption:
        return caption_clip(clip, video, client, c.caption.fps, c.caption.max_retries)

    with ThreadPoolExecutor(max_workers=max(1, c.caption.workers)) as pool:
        # map preserves clip order, so the log is written in a deterministic order
        for cap in pool.map(one, todo):
            bio.append_caption(path, cap)
    order = {clip.clip_id: i for i, clip in enumerate(clips)}
    return sorted(bio.read_captions(path), key=lambda x: order[x.clip.clip_id])


def behavior_merge(c: cfg.BehaviorRunConfig, client: PerceptionClient | None = None) -> BehaviorTimeline:
    out = Path(c.output)
    clips = bio.load_segments(out / "segments.csv")
    order = {clip.clip_id: i for i, clip in enumerate(clips)}
    captions = sorted(bio.read_captions(out / "captions.jsonl"), key=lambda x: order[x.clip.clip_id])
    if len(captions) != len(clips):
        raise ConfigError(f"{len(clips) - len(captions)} clips are not captioned yet; run behavior caption", key="captions")
    if client is None:
        client = make_client(c.client)
    per_animal: dict[str, list[ClipCaption]] = defaultdict(list)
    for cap in captions:
        per_animal[cap.clip.animal].append(cap)
    merged = {
        a: merge_segments(caps, client, c.merge.epoch_seconds, c.merge.max_retries) for a, caps in per_animal.items()
    }
    seqs = {s.animal: s for s in bio.load_features(c.features)}
    timeline = build_timeline(
        merged,
        n_frames={a: seqs[a].n_frames if a in seqs else merged[a][-1].end for a in merged},
        session={"features": Path(c.features).name, "dec_k": c.dec.k, "dec_seed": c.dec.seed},
    )
    timeline.save(out / "timeline.json")
    return timeline


def behavior_export(c: cfg.BehaviorRunConfig) -> tuple[Path, Path]:
    out = Path(c.output)
    timeline = BehaviorTimeline.load(out / "timeline.json")
    table = out / "timeline.csv"
    timeline.save_table(table)
    return out / "timeline.json", table


__all__ = [
    "behavior_caption",
    "behavior_cluster",
    "behavior_export",
    "behavior_merge",
    "make_client",
    "pose_config",
    "read_estimates",
    "requalify",
    "run_pose",
]
