"""Deep embedded clustering over precomputed per-frame behavioral features.

The embedding is the identity map: clustering runs directly in feature space
(an optional linear encoder can be supplied). Cluster centers are refined by
minimising ``sum_animals KL(P_a || Q_a)``, where ``Q`` is the Student-t soft
assignment and ``P`` the sharpened self-training target.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DegenerateCluster, ValidationError

DEAD_MASS = 1e-12
MAX_REINITS = 2


@dataclass
class FeatureSequence:
    """Per-frame features of one animal: ``features`` is ``(T, D)``."""

    animal: str
    fps: float
    features: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValidationError(f"{self.animal}: features must be a T x D matrix")
        T, D = self.features.shape
        if T < 2 or D < 1:
            raise ValidationError(f"{self.animal}: need T >= 2 and D >= 1, got {T} x {D}")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError(f"{self.animal}: non-finite feature values")
        if not self.fps > 0:
            raise ValidationError(f"{self.animal}: fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


def validate_session(sequences: Sequence[FeatureSequence]) -> None:
    """All animals of a session share frame count, dimension and frame rate."""
    if not sequences:
        raise ValidationError("session has no animals")
    first = sequences[0]
    names = [s.animal for s in sequences]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate animal ids in session")
    for s in sequences[1:]:
        if s.features.shape != first.features.shape or s.fps != first.fps:
            raise ValidationError(f"{s.animal}: frame count, dimension or fps differs from {first.animal}")


@dataclass
class DecModel:
    centroids: np.ndarray
    alpha: float = 1.0
    trace: list[float] = field(default_factory=list)
    seed: int = 0
    encoder: np.ndarray | None = None
    reinits: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def embed(self, features: np.ndarray) -> np.ndarray:
        return features if self.encoder is None else features @ self.encoder

    def soft_assign(self, features: np.ndarray) -> np.ndarray:
        return soft_assign(self.embed(features), self.centroids, self.alpha)

    def predict(self, features: np.ndarray) -> np.ndarray:
        # argmax returns the lowest index among ties
        return np.argmax(self.soft_assign(features), axis=1)


def _kernel(features: np.ndarray, centroids: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    with np.errstate(over="ignore"):
        w = (1.0 + d2 / alpha) ** (-(alpha + 1.0) / 2.0)
    return w, d2


def soft_assign(features: np.ndarray, centroids: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """Student-t similarity of each frame to each centroid, rows summing to one."""
    w, _ = _kernel(np.asarray(features, dtype=np.float64), np.asarray(centroids, dtype=np.float64), alpha)
    return w / w.sum(axis=1, keepdims=True)


def target_distribution(q: np.ndarray) -> np.ndarray:
    """Sharpened target ``p ~ q^2 / f`` with cluster frequencies ``f = sum_t q``."""
    f = q.sum(axis=0)
    if np.any(f <= 0):
        dead = [int(k) for k in np.flatnonzero(f <= 0)]
        raise DegenerateCluster(f"clusters {dead} have zero assignment mass")
    p = q**2 / f
    return p / p.sum(axis=1, keepdims=True)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Mean over frames of ``KL(p_t || q_t)``."""
    mask = p > 0
    terms = np.zeros_like(p)
    terms[mask] = p[mask] * (np.log(p[mask]) - np.log(q[mask]))
    return float(terms.sum() / p.shape[0])


def kl_gradient(
    features: np.ndarray, centroids: np.ndarray, p: np.ndarray, alpha: float = 1.0
) -> np.ndarray:
    """Gradient of ``kl_divergence(p, soft_assign(features, centroids))`` w.r.t. centroids, ``p`` fixed."""
    w, d2 = _kernel(features, centroids, alpha)
    q = w / w.sum(axis=1, keepdims=True)
    coef = (alpha + 1.0) / alpha * (p - q) / (1.0 + d2 / alpha)  # (T, K)
    diff = features[:, None, :] - centroids[None, :, :]
    return -(coef[:, :, None] * diff).sum(axis=0) / features.shape[0]


def _kmeans_once(X: np.ndarray, k: int, rng: np.random.Generator, iters: int) -> tuple[np.ndarray, float]:
    n = X.shape[0]
    centers = [X[int(rng.integers(n))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    C = np.array(centers)
    for _ in range(iters):
        labels = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(axis=2), axis=1)
        new = C.copy()
        for j in range(k):
            members = X[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.array_equal(new, C):
            break
        C = new
    inertia = float(((X[:, None, :] - C[None]) ** 2).sum(axis=2).min(axis=1).sum())
    return C, inertia


def kmeans_plus_plus(
    X: np.ndarray, k: int, rng: np.random.Generator, iters: int = 100, n_init: int = 1
) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations.

    With ``n_init > 1`` the run with the lowest inertia is kept (first on ties).
    """
    if n_init < 1:
        raise ValueError("n_init must be at least 1")
    best, best_inertia = None, np.inf
    for _ in range(n_init):
        C, inertia = _kmeans_once(X, k, rng, iters)
        if inertia < best_inertia:
            best, best_inertia = C, inertia
    return best


def _total_loss(Xs: Sequence[np.ndarray], C: np.ndarray, Ps: Sequence[np.ndarray], alpha: float) -> float:
    return sum(kl_divergence(p, soft_assign(x, C, alpha)) for x, p in zip(Xs, Ps))


def _total_grad(Xs: Sequence[np.ndarray], C: np.ndarray, Ps: Sequence[np.ndarray], alpha: float) -> np.ndarray:
    return sum(kl_gradient(x, C, p, alpha) for x, p in zip(Xs, Ps))


def _dead_clusters(X: np.ndarray, C: np.ndarray, alpha: float) -> list[int]:
    """Clusters without soft-assignment mass, plus later duplicates of another center."""
    w, _ = _kernel(X, C, alpha)
    with np.errstate(invalid="ignore", divide="ignore"):
        q = w / w.sum(axis=1, keepdims=True)
    mass = np.nansum(q, axis=0)
    dead = {int(j) for j in np.flatnonzero(~(mass > DEAD_MASS))}
    for i in range(len(C)):
        for j in range(i + 1, len(C)):
            if j not in dead and i not in dead and np.array_equal(C[i], C[j]):
                dead.add(j)
    return sorted(dead)


def dec_fit(
    sequences: Sequence[FeatureSequence],
    k: int = 10,
    epochs: int = 100,
    seed: int = 0,
    alpha: float = 1.0,
    learning_rate: float = 1.0,
    tol: float = 1e-9,
    encoder: np.ndarray | None = None,
    init_centroids: np.ndarray | None = None,
    n_init: int = 10,
) -> DecModel:
    """Fit cluster centers jointly across animals.

    Each epoch proposes a refreshed target from the current soft assignment
    and keeps it only if it does not raise the loss, then takes one
    backtracking gradient step on the centers with the target held fixed. The
    recorded loss trace is therefore non-increasing.

    Raises
    ------
    DegenerateCluster
        When a cluster keeps losing all of its mass after ``MAX_REINITS``
        re-initialisations.
    """
    if not sequences:
        raise ValueError("dec_fit needs at least one feature sequence")
    if k < 2:
        raise ValueError(f"K must be at least 2, got {k}")
    rng = np.random.default_rng(seed)
    Xs = [s.features if encoder is None else s.features @ encoder for s in sequences]
    pooled = np.vstack(Xs)
    if pooled.shape[0] < k:
        raise ValueError(f"only {pooled.shape[0]} frames for K={k} clusters")
    C = (
        np.array(init_centroids, dtype=np.float64)
        if init_centroids is not None
        else kmeans_plus_plus(pooled, k, rng, n_init=n_init)
    )
    reinits = 0

    def revive(C: np.ndarray) -> np.ndarray:
        nonlocal reinits
        while True:
            dead = _dead_clusters(pooled, C, alpha)
            if len(dead) == 0:
                return C
            if reinits >= MAX_REINITS:
                raise DegenerateCluster(f"clusters {dead} stayed empty after {reinits} re-initialisations")
            reinits += 1
            C = C.copy()
            alive = [j for j in range(k) if j not in dead]
            for j in dead:
                if alive:
                    far = ((pooled[:, None, :] - C[alive][None]) ** 2).sum(axis=2).min(axis=1)
                    C[j] = pooled[int(np.argmax(far))]
                else:
                    C[j] = pooled[int(rng.integers(len(pooled)))]
                alive.append(j)

    C = revive(C)
    Ps = [target_distribution(soft_assign(x, C, alpha)) for x in Xs]
    loss = _total_loss(Xs, C, Ps, alpha)
    trace = [loss]
    step = learning_rate
    for _ in range(epochs):
        candidate = [target_distribution(soft_assign(x, C, alpha)) for x in Xs]
        cand_loss = _total_loss(Xs, C, candidate, alpha)
        if cand_loss <= loss:
            Ps, loss = candidate, cand_loss
        g = _total_grad(Xs, C, Ps, alpha)
        gnorm2 = float((g**2).sum())
        moved = False
        for _ in range(40):
            trial = C - step * g
            trial_loss = _total_loss(Xs, trial, Ps, alpha)
            if trial_loss <= loss - 1e-4 * step * gnorm2:
                C, loss, moved = trial, trial_loss, True
                break
            step *= 0.5
        trace.append(loss)
        if not moved or trace[-2] - trace[-1] <= tol * max(1.0, abs(trace[-2])):
            break
        step *= 2.0
        if len(_dead_clusters(pooled, C, alpha)):
            # restart the descent from revived centers; the trace restarts with it
            C = revive(C)
            Ps = [target_distribution(soft_assign(x, C, alpha)) for x in Xs]
            loss = _total_loss(Xs, C, Ps, alpha)
            trace = [loss]
    return DecModel(centroids=C, alpha=alpha, trace=trace, seed=seed, encoder=encoder, reinits=reinits)
