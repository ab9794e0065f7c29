"""Command line entry point: ``vlmlabel``.

Exit codes: 0 success, 1 configuration or I/O error, 2 validation error,
3 perception client unavailable after retries.
"""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click

from . import config as cfg
from . import report as rep
from . import runner
from .errors import ClientUnavailable, ConfigError, ValidationError, VlmLabelError

EXIT_CONFIG, EXIT_VALIDATION, EXIT_UNAVAILABLE = 1, 2, 3


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error [{exc.key}]: {exc}" if exc.key else f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except ValidationError as exc:
            click.echo(f"validation error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except ClientUnavailable as exc:
            click.echo(f"client unavailable: {exc}", err=True)
            sys.exit(EXIT_UNAVAILABLE)
        except (VlmLabelError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)

    return wrapper


def _abs(path: str | None) -> str | None:
    return None if path is None else str(Path(path).resolve())


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose: int) -> None:
    """Few-shot perception-assisted labeling of multi-view pose and behavior."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# -- simulate ----------------------------------------------------------------


@main.group()
def simulate() -> None:
    """Write synthetic datasets with hidden ground truth."""


@simulate.command("rig")
@click.argument("out", type=click.Path(file_okay=False))
@click.option("--frames", default=500, show_default=True, help="Frames to label after the three seeds.")
@click.option("--seed", default=0, show_default=True)
@click.option("--noise", default=1.0, show_default=True, help="Centroid noise sigma in pixels.")
@click.option("--occlusion", default=0.0, show_default=True)
@click.option("--cameras", default=6, show_default=True)
@click.option("--p-swap", default=0.15, show_default=True, help="Oracle within-region swap rate.")
@click.option("--p-swap-global", default=0.0, show_default=True)
@_guarded
def simulate_rig(out, frames, seed, noise, occlusion, cameras, p_swap, p_swap_global) -> None:
    from .simulate import write_pose_dataset

    path = write_pose_dataset(out, frames, seed, noise, occlusion, cameras, p_swap, p_swap_global)
    click.echo(f"wrote {path}")


@simulate.command("session")
@click.argument("out", type=click.Path(file_okay=False))
@click.option("--animals", default=3, show_default=True)
@click.option("--frames", default=1800, show_default=True)
@click.option("--behaviors", default=4, show_default=True)
@click.option("--dim", default=16, show_default=True)
@click.option("--noise", default=1.0, show_default=True)
@click.option("--fps", default=10.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_guarded
def simulate_session(out, animals, frames, behaviors, dim, noise, fps, seed) -> None:
    from .simulate import write_behavior_dataset

    names = [f"A{i}" for i in range(animals)]
    path = write_behavior_dataset(out, names, frames, behaviors, dim, noise, fps, seed)
    click.echo(f"wrote {path}")


# -- pose --------------------------------------------------------------------


@main.group()
def pose() -> None:
    """Multi-view keypoint labeling."""


@pose.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--ablation", type=click.Choice(["full", "no-refine", "naive"]))
@click.option("--output", type=click.Path(file_okay=False))
@click.option("--max-frames", type=int)
@click.option("--workers", type=int)
@click.option("--fresh", is_flag=True, help="Discard an existing run in the output directory.")
@_guarded
def pose_run(config_path, ablation, output, max_frames, workers, fresh) -> None:
    c = cfg.load_config(
        cfg.PoseRunConfig,
        config_path,
        {"ablation": ablation, "output": _abs(output), "pipeline.max_frames": max_frames, "pipeline.workers": workers},
    )
    results = runner.run_pose(c, resume=not fresh)
    flagged = sum(any(v.verdict == "flag" for v in r.qc) for r in results)
    click.echo(f"{len(results)} frames labeled ({flagged} with flags) -> {c.output}")


@pose.command("qc")
@click.argument("run", type=click.Path(exists=True, file_okay=False))
@click.option("--tau", type=float, required=True, help="QC reprojection threshold in pixels.")
@_guarded
def pose_qc(run, tau) -> None:
    n_flag, n_total, path = runner.requalify(Path(run), tau)
    click.echo(f"{n_flag}/{n_total} keypoint labels flagged at tau={tau:g} px -> {path}")


# -- behavior ----------------------------------------------------------------


@main.group()
def behavior() -> None:
    """Unsupervised behavior segmentation and captioning."""


def _behavior_config(config_path: str, **overrides) -> cfg.BehaviorRunConfig:
    return cfg.load_config(cfg.BehaviorRunConfig, config_path, overrides)


@behavior.command("cluster")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--k", type=int)
@click.option("--seed", type=int)
@_guarded
def behavior_cluster(config_path, k, seed) -> None:
    c = _behavior_config(config_path, **{"dec.k": k, "dec.seed": seed})
    clips = runner.behavior_cluster(c)
    click.echo(f"{len(clips)} clips -> {Path(c.output) / 'segments.csv'}")


@behavior.command("caption")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def behavior_caption(config_path) -> None:
    c = _behavior_config(config_path)
    caps = runner.behavior_caption(c)
    missing = sum(not x.captioned for x in caps)
    click.echo(f"{len(caps)} clips captioned ({missing} uncaptioned)")


@behavior.command("merge")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def behavior_merge(config_path) -> None:
    c = _behavior_config(config_path)
    timeline = runner.behavior_merge(c)
    n = sum(len(s) for s in timeline.animals.values())
    click.echo(f"{n} merged segments -> {Path(c.output) / 'timeline.json'}")


@behavior.command("export")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def behavior_export(config_path) -> None:
    doc, table = runner.behavior_export(_behavior_config(config_path))
    click.echo(f"{doc}\n{table}")


# -- report ------------------------------------------------------------------


@main.group()
def report() -> None:
    """Summary tables."""


@report.command("pose")
@click.argument("run", type=click.Path(exists=True, file_okay=False))
@click.option("--truth", type=click.Path(exists=True, file_okay=False), help="Simulator truth directory.")
@_guarded
def report_pose(run, truth) -> None:
    rows = rep.pose_table(Path(run), Path(truth) if truth else None)
    rep.write_table(rows, Path(run) / "report_pose.csv")
    click.echo(rep.format_table(rows))


@report.command("behavior")
@click.argument("timeline", type=click.Path(exists=True, dir_okay=False))
@_guarded
def report_behavior(timeline) -> None:
    from .behavior.semantics import BehaviorTimeline

    rows = rep.behavior_table(BehaviorTimeline.load(timeline))
    rep.write_table(rows, Path(timeline).with_name("report_behavior.csv"))
    click.echo(rep.format_table(rows))


if __name__ == "__main__":
    main()
