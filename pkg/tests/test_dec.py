from __future__ import annotations

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from vlmlabel.behavior.dec import (
    FeatureSequence,
    dec_fit,
    kl_divergence,
    kl_gradient,
    kmeans_plus_plus,
    soft_assign,
    target_distribution,
    validate_session,
)
from vlmlabel.errors import DegenerateCluster, ValidationError
from vlmlabel.synth import generate_feature_session


def test_soft_assign_matches_hand_computed_kernel():
    # one frame at distance 1 and 2 from the centers: weights 1/2 and 1/5
    q = soft_assign(np.array([[0.0]]), np.array([[1.0], [-2.0]]))
    assert q[0] == pytest.approx([0.5 / 0.7, 0.2 / 0.7])


def test_soft_assign_general_alpha():
    X = np.array([[0.0, 0.0]])
    C = np.array([[3.0, 4.0], [0.0, 1.0]])
    w = (1 + np.array([25.0, 1.0]) / 2.0) ** (-1.5)
    assert soft_assign(X, C, alpha=2.0)[0] == pytest.approx(w / w.sum())


def test_target_distribution_sharpens():
    q = np.array([[0.6, 0.4], [0.5, 0.5], [0.2, 0.8]])
    p = target_distribution(q)
    f = q.sum(axis=0)
    expected = q**2 / f
    assert p == pytest.approx(expected / expected.sum(axis=1, keepdims=True))
    assert p[0, 0] > q[0, 0] and p[2, 1] > q[2, 1]


def test_target_distribution_dead_cluster():
    with pytest.raises(DegenerateCluster, match=r"\[1\]"):
        target_distribution(np.array([[1.0, 0.0], [1.0, 0.0]]))


def test_kl_is_zero_for_equal_distributions(rng):
    q = rng.dirichlet(np.ones(4), size=20)
    assert kl_divergence(q, q) == pytest.approx(0.0, abs=1e-15)
    assert kl_divergence(target_distribution(q), q) > 0


@pytest.mark.parametrize("alpha", [1.0, 2.5])
def test_gradient_matches_finite_differences(rng, alpha):
    X = rng.normal(size=(40, 3))
    C = rng.normal(size=(4, 3))
    P = target_distribution(soft_assign(X, C, alpha))
    g = kl_gradient(X, C, P, alpha)
    h = 1e-6
    num = np.zeros_like(C)
    for idx in np.ndindex(C.shape):
        Cp, Cm = C.copy(), C.copy()
        Cp[idx] += h
        Cm[idx] -= h
        num[idx] = (kl_divergence(P, soft_assign(X, Cp, alpha)) - kl_divergence(P, soft_assign(X, Cm, alpha))) / (2 * h)
    assert np.max(np.abs(g - num)) / np.max(np.abs(num)) < 1e-5


def test_kmeans_plus_plus_finds_separated_blobs(rng):
    centers = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
    X = np.vstack([c + rng.normal(size=(50, 2)) for c in centers])
    C = kmeans_plus_plus(X, 3, np.random.default_rng(0))
    for c in centers:
        assert np.min(np.linalg.norm(C - c, axis=1)) < 1.0


def test_kmeans_restarts_keep_lowest_inertia(rng):
    centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0], [6.0, 6.0]])
    X = np.vstack([c + rng.normal(size=(40, 2)) for c in centers])

    def inertia(C):
        return ((X[:, None] - C[None]) ** 2).sum(axis=2).min(axis=1).sum()

    # the first restart replays the single run, so restarts can only improve on it
    single = inertia(kmeans_plus_plus(X, 4, np.random.default_rng(0)))
    best = inertia(kmeans_plus_plus(X, 4, np.random.default_rng(0), n_init=10))
    assert best <= single
    with pytest.raises(ValueError):
        kmeans_plus_plus(X, 4, np.random.default_rng(0), n_init=0)


def _session(seed, noise=1.0):
    return generate_feature_session(seed=seed, n_frames=600, noise=noise, n_behaviors=4)


def test_dec_recovers_planted_behaviors():
    seqs, planted = _session(4)
    model = dec_fit(seqs, k=4, seed=4)
    truth = np.repeat([s.cluster for s in planted], [s.n_frames for s in planted])
    pred = np.concatenate([model.predict(s.features) for s in seqs])
    assert adjusted_rand_score(truth, pred) >= 0.9


def test_dec_trace_is_non_increasing():
    seqs, _ = _session(5, noise=2.5)
    model = dec_fit(seqs, k=5, seed=1, epochs=60)
    diffs = np.diff(model.trace)
    assert len(model.trace) > 1
    assert np.all(diffs <= 1e-6)


def test_dec_is_deterministic():
    seqs, _ = _session(6)
    a, b = dec_fit(seqs, k=4, seed=3), dec_fit(seqs, k=4, seed=3)
    assert np.array_equal(a.centroids, b.centroids) and a.trace == b.trace


def test_dec_rejects_small_k():
    seqs, _ = _session(0)
    with pytest.raises(ValueError, match="K must be"):
        dec_fit(seqs, k=1)
    with pytest.raises(ValueError):
        dec_fit([], k=3)


def test_dec_revives_empty_cluster():
    seqs, _ = _session(2)
    init = np.vstack([seqs[0].features[:3], np.full((1, seqs[0].features.shape[1]), 1e9)])
    model = dec_fit(seqs, k=4, seed=0, init_centroids=init)
    assert model.reinits >= 1
    assert np.all(np.abs(model.centroids) < 1e6)


def test_dec_gives_up_when_clusters_cannot_be_revived():
    # every frame identical: duplicate centers cannot be separated
    seq = FeatureSequence("A", 10.0, np.zeros((20, 2)))
    with pytest.raises(DegenerateCluster):
        dec_fit([seq], k=3, seed=0)


def test_linear_encoder_is_applied(rng):
    seqs, _ = _session(7)
    enc = np.linalg.qr(rng.normal(size=(16, 16)))[0][:, :8]
    model = dec_fit(seqs, k=4, seed=0, encoder=enc)
    assert model.centroids.shape == (4, 8)
    assert model.predict(seqs[0].features).shape == (seqs[0].n_frames,)


def test_feature_sequence_validation():
    with pytest.raises(ValidationError):
        FeatureSequence("A", 10.0, np.zeros(5))
    with pytest.raises(ValidationError):
        FeatureSequence("A", 10.0, np.array([[np.nan], [1.0]]))
    with pytest.raises(ValidationError):
        FeatureSequence("A", 0.0, np.zeros((3, 2)))


def test_session_validation():
    a = FeatureSequence("A", 10.0, np.zeros((5, 2)))
    with pytest.raises(ValidationError, match="duplicate"):
        validate_session([a, a])
    with pytest.raises(ValidationError, match="differs"):
        validate_session([a, FeatureSequence("B", 10.0, np.zeros((6, 2)))])
    with pytest.raises(ValidationError):
        validate_session([])
