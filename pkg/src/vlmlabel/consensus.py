"""Cross-view consensus refinement of centroid assignments.

For each keypoint the assigned centroids of all views are triangulated with a
RANSAC search over camera subsets. Views that disagree with the consensus
("target" cameras) are offered alternative nearby centroids; each alternative
is re-scored by triangulating again, and the best one is applied, swapping
centroids between keypoints when the candidate already has an owner.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateDepth, InsufficientViews, NoConsensus
from .geometry import (
    CONDITION_LIMIT,
    DEPTH_EPS,
    CameraModel,
    project,
    triangulate_dlt,
)
from .pose.model import KEYPOINTS, AssignmentState, FrameObservation

# cost assigned to a keypoint that cannot be triangulated; keeps hypothesis
# scores finite and comparable
UNTRIANGULATED_COST = 1e4


@dataclass(frozen=True)
class RansacConfig:
    """RANSAC triangulation settings.

    ``exhaustive=None`` enumerates every subset when the rig has at most
    ``exhaustive_max_cameras`` cameras and samples randomly otherwise.
    """

    tau_reproj: float = 5.0
    max_subset_size: int = 2
    iterations: int = 200
    seed: int = 0
    exhaustive: bool | None = None
    exhaustive_max_cameras: int = 6

    def __post_init__(self) -> None:
        if not self.tau_reproj > 0:
            raise ValueError("tau_reproj must be positive")
        if self.max_subset_size < 2:
            raise ValueError("max_subset_size must be at least 2")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")


@dataclass(frozen=True)
class RefineConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    radius: float = 40.0
    tau_qc: float = 10.0
    max_passes: int = 2


@dataclass(frozen=True)
class Keypoint3DEstimate:
    keypoint: str
    point: np.ndarray
    inlier_cameras: tuple[str, ...]
    per_camera_error: dict[str, float]
    mean_inlier_error: float

    @property
    def n_inliers(self) -> int:
        return len(self.inlier_cameras)

    def mean_error(self) -> float:
        """Mean reprojection error over every observed camera, inliers or not."""
        return float(np.mean(list(self.per_camera_error.values())))


@dataclass(frozen=True)
class Hypothesis:
    """One candidate assignment of ``keypoint`` in ``target_camera``.

    ``implied_swaps`` lists the other keypoints whose centroid changes as a
    consequence, as ``(keypoint, old, new)``.
    """

    target_camera: str
    keypoint: str
    candidate_centroid: int | None
    current_centroid: int | None
    implied_swaps: tuple[tuple[str, int | None, int | None], ...] = ()
    score: float = math.nan

    @property
    def keeps_current(self) -> bool:
        return self.candidate_centroid == self.current_centroid

    def apply(self, state: AssignmentState, provenance: str = "stage-4") -> None:
        if self.keeps_current:
            return
        for kp, _old, new in self.implied_swaps:
            state.set(self.target_camera, kp, new, provenance)
        state.set(self.target_camera, self.keypoint, self.candidate_centroid, provenance)

    def to_dict(self) -> dict[str, Any]:
        return {
            "camera": self.target_camera,
            "keypoint": self.keypoint,
            "candidate": self.candidate_centroid,
            "current": self.current_centroid,
            "implied_swaps": [list(s) for s in self.implied_swaps],
            "score": self.score,
        }


class QCVerdict(NamedTuple):
    keypoint: str
    verdict: str
    reason: str


# -- RANSAC ---------------------------------------------------------------


def _batched_dlt(projections: np.ndarray, centers: np.ndarray, uv: np.ndarray, subsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Triangulate every row of ``subsets`` (``(S, k)`` camera indices) at once.

    Each subset is conditioned by its own camera centers, exactly as
    :func:`triangulate_dlt` would condition it. Returns world points and a
    validity mask.
    """
    sub_centers = centers[subsets]  # (S, k, 3)
    mid = sub_centers.mean(axis=1)
    scale = np.sqrt(((sub_centers - mid[:, None]) ** 2).sum(axis=2).mean(axis=1))
    scale[scale <= 0] = 1.0
    T = np.zeros((len(subsets), 4, 4))
    T[:, :3, :3] = scale[:, None, None] * np.eye(3)
    T[:, :3, 3] = mid
    T[:, 3, 3] = 1.0
    Ps = np.einsum("skij,sjl->skil", projections[subsets], T)  # (S, k, 3, 4)
    u = uv[subsets][..., 0:1]
    v = uv[subsets][..., 1:2]
    rows = np.concatenate([u * Ps[:, :, 2] - Ps[:, :, 0], v * Ps[:, :, 2] - Ps[:, :, 1]], axis=1)
    norms = np.linalg.norm(rows, axis=2, keepdims=True)
    norms[norms == 0] = 1.0
    rows = rows / norms
    _, s, vt = np.linalg.svd(rows)
    X = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (s[:, 2] > 0) & (s[:, 0] / s[:, 2] <= CONDITION_LIMIT)
        ok &= np.abs(X[:, 3]) > 1e-12 * np.linalg.norm(X, axis=1)
        local = X[:, :3] / X[:, 3:4]
    world = scale[:, None] * local + mid
    return world, ok


def _all_errors(cameras: Sequence[CameraModel], uv: np.ndarray, points: np.ndarray) -> np.ndarray:
    """``(S, N)`` reprojection errors of ``S`` world points in ``N`` cameras; inf for bad depth."""
    R = np.stack([c.rotation for c in cameras])
    t = np.stack([c.translation for c in cameras])
    K = np.stack([c.intrinsics for c in cameras])
    cam = np.einsum("nij,sj->sni", R, points) + t[None]
    pix = np.einsum("nij,snj->sni", K, cam)
    depth = cam[..., 2]
    ok = depth > DEPTH_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        uvp = pix[..., :2] / pix[..., 2:3]
    errs = np.hypot(uvp[..., 0] - uv[None, :, 0], uvp[..., 1] - uv[None, :, 1])
    return np.where(ok, errs, np.inf)


def candidate_subsets(n: int, config: RansacConfig) -> list[tuple[int, ...]]:
    """Camera subsets examined by RANSAC, in a deterministic order."""
    exhaustive = config.exhaustive
    if exhaustive is None:
        exhaustive = n <= config.exhaustive_max_cameras
    if exhaustive:
        return [c for k in range(2, n + 1) for c in itertools.combinations(range(n), k)]
    rng = np.random.default_rng(config.seed)
    kmax = min(config.max_subset_size, n)
    seen: dict[tuple[int, ...], None] = {}
    for _ in range(config.iterations):
        k = int(rng.integers(2, kmax + 1))
        seen[tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False)))] = None
    return list(seen)


def _estimate(
    keypoint: str, names: Sequence[str], point: np.ndarray, errors: np.ndarray, tau: float
) -> Keypoint3DEstimate | None:
    mask = errors <= tau
    if mask.sum() < 2:
        return None
    inliers = tuple(sorted(n for n, m in zip(names, mask) if m))
    return Keypoint3DEstimate(
        keypoint=keypoint,
        point=point,
        inlier_cameras=inliers,
        per_camera_error={n: float(e) for n, e in zip(names, errors)},
        mean_inlier_error=float(errors[mask].mean()),
    )


def ransac_triangulate(
    observations: Sequence[tuple[CameraModel, Sequence[float]]],
    config: RansacConfig = RansacConfig(),
    keypoint: str = "",
) -> Keypoint3DEstimate:
    """Triangulate with the camera subset that maximises the inlier count.

    Ties on inlier count go to the lower mean inlier error, then to the
    lexicographically smaller inlier name tuple. The winner is re-triangulated
    once on all of its inliers; if that refit keeps fewer than two inliers the
    consensus solution is returned instead.
    """
    n = len(observations)
    if n < 2:
        raise InsufficientViews(f"{keypoint or 'keypoint'}: need at least 2 views, got {n}")
    cameras = [c for c, _ in observations]
    names = [c.name for c in cameras]
    uv = np.array([np.asarray(p, dtype=np.float64).reshape(2) for _, p in observations])
    P = np.stack([c.projection for c in cameras])
    centers = np.stack([c.center for c in cameras])

    subsets = candidate_subsets(n, config)
    by_size: dict[int, list[tuple[int, ...]]] = {}
    for s in subsets:
        by_size.setdefault(len(s), []).append(s)

    best_key = None
    best: tuple[np.ndarray, np.ndarray] | None = None
    for k in sorted(by_size):
        idx = np.array(by_size[k], dtype=int)
        world, ok = _batched_dlt(P, centers, uv, idx)
        if not ok.any():
            continue
        world = world[ok]
        errs = _all_errors(cameras, uv, world)
        inl = errs <= config.tau_reproj
        counts = inl.sum(axis=1)
        for r in np.flatnonzero(counts >= 2):
            mean = float(errs[r][inl[r]].mean())
            key = (-int(counts[r]), mean, tuple(sorted(names[j] for j in np.flatnonzero(inl[r]))))
            if best_key is None or key < best_key:
                best_key, best = key, (world[r], errs[r])
    if best is None:
        raise NoConsensus(f"{keypoint or 'keypoint'}: no camera subset has 2 inliers")

    seed_point, seed_errors = best
    mask = seed_errors <= config.tau_reproj
    consensus = _estimate(keypoint, names, seed_point, seed_errors, config.tau_reproj)
    try:
        refit = triangulate_dlt([observations[j] for j in np.flatnonzero(mask)])
    except Exception:
        return consensus  # type: ignore[return-value]
    refit_errors = _all_errors(cameras, uv, refit[None, :])[0]
    return _estimate(keypoint, names, refit, refit_errors, config.tau_reproj) or consensus  # type: ignore[return-value]


def partition_cameras(
    estimate: Keypoint3DEstimate | None, all_errors: Mapping[str, float], tau: float
) -> tuple[set[str], set[str]]:
    """Split cameras into trusted (error <= tau) and correction targets."""
    locked = {c for c, e in all_errors.items() if e <= tau}
    target = set(all_errors) - locked
    return locked, target


# -- hypotheses -------------------------------------------------------------


def enumerate_hypotheses(
    target_camera: CameraModel,
    frame: FrameObservation,
    estimate: Keypoint3DEstimate,
    assignment: Mapping[str, int | None],
    radius: float,
) -> list[Hypothesis]:
    """Keep-current plus every centroid within ``radius`` px of the projected estimate.

    ``assignment`` is the current keypoint-to-centroid map of this camera.
    Alternatives are ordered by distance to the projection, then index.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    kp = estimate.keypoint
    current = assignment.get(kp)
    try:
        uv = project(target_camera, estimate.point)
    except DegenerateDepth:
        return []
    keep = Hypothesis(target_camera.name, kp, current, current)
    if frame.n_centroids == 0:
        return [keep]
    d = np.hypot(frame.centroids[:, 0] - uv[0], frame.centroids[:, 1] - uv[1])
    owners = {idx: k for k, idx in assignment.items() if idx is not None}
    out = [keep]
    for i in sorted(np.flatnonzero(d <= radius), key=lambda j: (d[j], j)):
        i = int(i)
        if i == current:
            continue
        owner = owners.get(i)
        swaps = ((owner, i, current),) if owner is not None else ()
        out.append(Hypothesis(target_camera.name, kp, i, current, swaps))
    return out


@dataclass
class ScoringContext:
    """Everything needed to re-triangulate a keypoint under a trial assignment."""

    cameras: Mapping[str, CameraModel]
    observations: Mapping[str, FrameObservation]
    state: AssignmentState
    config: RansacConfig
    _cache: dict[tuple, Keypoint3DEstimate | Exception] = field(default_factory=dict, repr=False)

    def observations_for(self, keypoint: str, state: AssignmentState | None = None):
        state = state or self.state
        out = []
        for view in self.cameras:
            if view not in state.views:
                continue
            idx = state.get(view, keypoint)
            if idx is not None:
                out.append((self.cameras[view], self.observations[view].centroids[idx]))
        return out

    def estimate(self, keypoint: str, state: AssignmentState | None = None) -> Keypoint3DEstimate:
        state = state or self.state
        # memoised on the keypoint's centroid choice in every view
        key = (keypoint,) + tuple(state.views[v][keypoint] for v in self.cameras if v in state.views)
        hit = self._cache.get(key)
        if hit is None:
            try:
                hit = ransac_triangulate(self.observations_for(keypoint, state), self.config, keypoint)
            except (InsufficientViews, NoConsensus) as exc:
                hit = exc
            self._cache[key] = hit
        if isinstance(hit, Exception):
            raise type(hit)(str(hit))
        return hit

    def cost(self, keypoint: str, state: AssignmentState | None = None) -> float:
        """Mean reprojection error over all assigned views of the RANSAC estimate."""
        try:
            return self.estimate(keypoint, state).mean_error()
        except (InsufficientViews, NoConsensus):
            return UNTRIANGULATED_COST


def score_hypotheses(hypotheses: Sequence[Hypothesis], context: ScoringContext) -> list[Hypothesis]:
    """Score every hypothesis on the same set of affected keypoints.

    The affected set is the focal keypoint plus every keypoint any hypothesis
    would displace, so keep-current and swap hypotheses are compared on equal
    terms and a swap cannot win by ruining the displaced keypoint.
    """
    affected = [hypotheses[0].keypoint]
    for h in hypotheses:
        for kp, _, _ in h.implied_swaps:
            if kp not in affected:
                affected.append(kp)
    base = {kp: context.cost(kp) for kp in affected}
    scored = []
    for h in hypotheses:
        if h.keeps_current:
            costs = base
        else:
            trial = context.state.copy()
            h.apply(trial)
            touched = {h.keypoint} | {kp for kp, _, _ in h.implied_swaps}
            costs = {kp: (context.cost(kp, trial) if kp in touched else base[kp]) for kp in affected}
        scored.append(replace(h, score=float(np.mean([costs[kp] for kp in affected]))))
    return scored


def score_and_select(hypotheses: Sequence[Hypothesis], context: ScoringContext) -> Hypothesis:
    """Lowest-score hypothesis; keep-current wins ties."""
    if not hypotheses:
        raise ValueError("no hypotheses to select from")
    return _select(score_hypotheses(hypotheses, context))


def _select(scored: Sequence[Hypothesis]) -> Hypothesis:
    best = next((h for h in scored if h.keeps_current), scored[0])
    for h in scored:
        if h.score < best.score:
            best = h
    return best


# -- frame refinement -------------------------------------------------------


@dataclass
class RefineResult:
    state: AssignmentState
    estimates: list[Keypoint3DEstimate]
    failed: dict[str, str]
    log: list[dict[str, Any]]

    def __iter__(self):
        # unpacks as (state, estimates)
        return iter((self.state, self.estimates))


def refine_frame(
    assignments: AssignmentState,
    observations: Mapping[str, FrameObservation],
    cameras: Mapping[str, CameraModel],
    config: RefineConfig = RefineConfig(),
) -> RefineResult:
    """Cross-view consistency correction of one frame's assignments.

    Keypoints are visited in schema order. After one full pass, a second pass
    revisits only keypoints whose assignment changed (``config.max_passes``
    bounds the number of passes). Keypoints that cannot be triangulated are
    reported in ``failed`` instead of failing the frame.
    """
    state = assignments.copy()
    cams = {name: cam for name, cam in cameras.items() if name in state.views}
    ctx = ScoringContext(cams, observations, state, config.ransac)
    log: list[dict[str, Any]] = []
    tau = config.ransac.tau_reproj

    def visit(kp: str) -> set[str]:
        changed: set[str] = set()
        try:
            est = ctx.estimate(kp)
        except (InsufficientViews, NoConsensus):
            return changed
        _, target = partition_cameras(est, est.per_camera_error, tau)
        for view in sorted(target, key=lambda v: (-est.per_camera_error[v], v)):
            hyps = enumerate_hypotheses(cams[view], observations[view], est, state.views[view], config.radius)
            if len(hyps) < 2:
                continue
            scored = score_hypotheses(hyps, ctx)
            best = _select(scored)
            keep = next(h for h in scored if h.keeps_current)
            entry = {
                "frame": state.frame_index,
                "keypoint": kp,
                "camera": view,
                "chosen": best.to_dict(),
                "score_before": keep.score,
                "score_after": best.score,
                "swaps_applied": [],
            }
            if not best.keeps_current:
                best.apply(state)
                changed.add(kp)
                changed.update(s[0] for s in best.implied_swaps)
                entry["swaps_applied"] = [[kp, best.current_centroid, best.candidate_centroid]] + [
                    list(s) for s in best.implied_swaps
                ]
                try:
                    est = ctx.estimate(kp)
                except (InsufficientViews, NoConsensus):
                    log.append(entry)
                    break
            log.append(entry)
        return changed

    pending = list(KEYPOINTS)
    for _ in range(config.max_passes):
        changed: set[str] = set()
        for kp in pending:
            changed |= visit(kp)
        if not changed:
            break
        pending = [kp for kp in KEYPOINTS if kp in changed]

    estimates: list[Keypoint3DEstimate] = []
    failed: dict[str, str] = {}
    for kp in KEYPOINTS:
        try:
            estimates.append(ctx.estimate(kp))
        except InsufficientViews:
            failed[kp] = "insufficient-views"
        except NoConsensus:
            failed[kp] = "no-consensus"
    return RefineResult(state, estimates, failed, log)


def plain_estimates(
    assignments: AssignmentState,
    observations: Mapping[str, FrameObservation],
    cameras: Mapping[str, CameraModel],
    tau: float,
) -> tuple[list[Keypoint3DEstimate], dict[str, str]]:
    """All-view DLT without outlier rejection, for runs with refinement disabled.

    ``inlier_cameras`` lists the views within ``tau``; when fewer than two
    views agree the estimate is still returned, with every view listed, so the
    QC report can flag it rather than drop it.
    """
    cams = {k: v for k, v in cameras.items() if k in assignments.views}
    ctx = ScoringContext(cams, observations, assignments, RansacConfig(tau_reproj=tau))
    estimates, failed = [], {}
    for kp in KEYPOINTS:
        obs = ctx.observations_for(kp)
        if len(obs) < 2:
            failed[kp] = "insufficient-views"
            continue
        try:
            X = triangulate_dlt(obs)
        except Exception:
            failed[kp] = "no-consensus"
            continue
        names = [c.name for c, _ in obs]
        uv = np.array([p for _, p in obs])
        errs = _all_errors([c for c, _ in obs], uv, X[None, :])[0]
        mask = errs <= tau
        if mask.sum() < 2:
            mask = np.ones_like(mask)
        estimates.append(
            Keypoint3DEstimate(
                kp,
                X,
                tuple(sorted(n for n, m in zip(names, mask) if m)),
                {n: float(e) for n, e in zip(names, errs)},
                float(errs[mask].mean()),
            )
        )
    return estimates, failed


def qc_filter(
    estimates: Sequence[Keypoint3DEstimate],
    tau_qc: float = 10.0,
    failed: Mapping[str, str] | None = None,
) -> list[QCVerdict]:
    """Accept or flag each keypoint estimate for manual review.

    A keypoint is flagged when its mean inlier error exceeds ``tau_qc``, when
    fewer than three cameras are inliers, when any labelled view reprojects
    further than ``tau_qc`` (the 2D label there is suspect even though the 3D
    point is fine), or when it could not be triangulated.
    """
    out = []
    for est in estimates:
        reasons = []
        if est.mean_inlier_error > tau_qc:
            reasons.append("high-error")
        if est.n_inliers < 3:
            reasons.append("few-inliers")
        bad_views = sorted(v for v, e in est.per_camera_error.items() if e > tau_qc)
        if bad_views:
            reasons.append("outlier-views:" + ",".join(bad_views))
        out.append(QCVerdict(est.keypoint, "flag" if reasons else "accept", ";".join(reasons)))
    for kp, reason in (failed or {}).items():
        out.append(QCVerdict(kp, "flag", reason))
    order = {kp: i for i, kp in enumerate(KEYPOINTS)}
    out.sort(key=lambda v: order.get(v.keypoint, len(order)))
    return out


def merge_verdicts(verdicts: Sequence[QCVerdict], extra: Mapping[str, Sequence[str]]) -> list[QCVerdict]:
    """Add flag reasons per keypoint; a keypoint with any reason is flagged."""
    out = []
    for v in verdicts:
        more = [r for r in extra.get(v.keypoint, ()) if r not in v.reason.split(";")]
        if more and v.keypoint != "*":
            reason = ";".join(filter(None, [v.reason, *more]))
            v = QCVerdict(v.keypoint, "flag", reason)
        out.append(v)
    return out


class MotionCheck:
    """Flags keypoints whose 3D point moves further than the animal can between frames.

    A left/right identity flip applied consistently in every view passes all
    reprojection checks, but the keypoint's 3D point jumps by the distance
    between the two body parts. The reference is the keypoint's last accepted
    position; the allowance is ``max_step`` mm per elapsed frame, so a run
    recovers on its own after a long occlusion.
    """

    def __init__(self, max_step: float, last: Mapping[str, tuple[int, np.ndarray]] | None = None) -> None:
        if not max_step > 0:
            raise ValueError("max_step must be positive")
        self.max_step = max_step
        self.last: dict[str, tuple[int, np.ndarray]] = dict(last or {})

    def apply(self, frame_index: int, estimates: Sequence[Keypoint3DEstimate], verdicts: Sequence[QCVerdict]) -> list[QCVerdict]:
        jumps: dict[str, list[str]] = {}
        for est in estimates:
            ref = self.last.get(est.keypoint)
            if ref is None:
                continue
            d = float(np.linalg.norm(est.point - ref[1]))
            if d > self.max_step * (frame_index - ref[0]):
                jumps[est.keypoint] = [f"jump:{d:.1f}mm"]
        out = merge_verdicts(verdicts, jumps)
        accepted = {v.keypoint for v in out if v.verdict == "accept"}
        for est in estimates:
            if est.keypoint in accepted:
                self.last[est.keypoint] = (frame_index, est.point)
        return out
