from __future__ import annotations

import numpy as np
import pytest

from vlmlabel.clients.oracle import CorruptionSpec, OracleClient, PoseTruth, ScriptedClient, UnavailableClient
from vlmlabel.errors import ClientUnavailable, ValidationError
from vlmlabel.pose.model import KEYPOINTS
from vlmlabel.pose.pipeline import PoseConfig, run_sequence, seed_window

from conftest import make_sim, seeds_of


def _mean_3d_error(sim, results):
    errs = []
    for r in results:
        f = r.frame_index
        for e in r.estimates:
            errs.append(np.linalg.norm(e.point - sim.points[f, KEYPOINTS.index(e.keypoint)]))
    return float(np.mean(errs))


def _run(sim, cams, config, client, start=3, stop=None):
    return run_sequence(sim.frames[start:stop], seeds_of(sim), cams, config, client)


def test_clean_client_gives_sub_mm_error(small_sim, small_truth, cams):
    results = _run(small_sim, cams, PoseConfig(workers=1), OracleClient(small_truth))
    assert len(results) == len(small_sim.frames) - 3
    for r in results:
        assert r.state.views == small_sim.truth[r.frame_index]
        assert not r.degraded
    assert _mean_3d_error(small_sim, results) < 1.0


def test_workers_do_not_change_results(small_sim, small_truth, cams):
    corr = CorruptionSpec(p_swap=0.2, box_jitter=4.0)
    a = _run(small_sim, cams, PoseConfig(workers=1), OracleClient(small_truth, corruption=corr, seed=5), stop=12)
    b = _run(small_sim, cams, PoseConfig(workers=6), OracleClient(small_truth, corruption=corr, seed=5), stop=12)
    assert [r.state.views for r in a] == [r.state.views for r in b]
    for ra, rb in zip(a, b):
        for ea, eb in zip(ra.estimates, rb.estimates):
            assert np.array_equal(ea.point, eb.point)


def test_duplicate_seed_centroid_rejected_before_any_call(small_sim, cams):
    seeds = seeds_of(small_sim)
    state = seeds[1][0]
    state.views["cam2"]["ear_R"] = state.views["cam2"]["ear_L"]
    client = ScriptedClient([RuntimeError("must not be called")])
    with pytest.raises(ValidationError, match="twice"):
        run_sequence(small_sim.frames[3:5], seeds, cams, PoseConfig(workers=1), client)
    assert client.requests == []


def test_seed_views_must_match_observations(small_sim):
    seeds = seeds_of(small_sim)
    del seeds[0][0].views["cam5"]
    with pytest.raises(ValidationError):
        seed_window(seeds)


def test_two_seed_frames_are_not_enough(small_sim):
    with pytest.raises(ValidationError, match="3 seed"):
        seed_window(seeds_of(small_sim, (0, 1)))


def test_frames_must_follow_window(small_sim, small_truth, cams):
    with pytest.raises(ValidationError, match="does not follow"):
        run_sequence(small_sim.frames[2:4], seeds_of(small_sim), cams, PoseConfig(workers=1), OracleClient(small_truth))


def test_unavailable_client_degrades_but_continues(small_sim, cams):
    cfg = PoseConfig(workers=1, max_consecutive_unavailable=100)
    results = _run(small_sim, cams, cfg, UnavailableClient(), stop=8)
    assert len(results) == 5
    for r in results:
        assert r.degraded and r.unavailable
        assert any(v.keypoint == "*" and v.verdict == "flag" for v in r.qc)
        assert r.state.is_injective()


def test_consecutive_unavailable_frames_abort(small_sim, cams):
    seen = []
    cfg = PoseConfig(workers=1, max_consecutive_unavailable=3)
    with pytest.raises(ClientUnavailable, match="3 consecutive"):
        run_sequence(small_sim.frames[3:], seeds_of(small_sim), cams, cfg, UnavailableClient(), on_frame=seen.append)
    # the third dead frame triggers the abort before it is reported
    assert [r.frame_index for r in seen] == [3, 4]


def test_window_tracks_last_three_frames(small_sim, small_truth, cams):
    window = seed_window(seeds_of(small_sim))
    run_sequence(small_sim.frames[3:9], None, cams, PoseConfig(workers=1), OracleClient(small_truth), window=window)
    assert window.frame_indices == [6, 7, 8]


def test_strict_window_skips_flagged_frames(small_sim, cams):
    window = seed_window(seeds_of(small_sim))
    cfg = PoseConfig(workers=1, strict_window=True, max_consecutive_unavailable=100)
    run_sequence(small_sim.frames[3:6], None, cams, cfg, UnavailableClient(), window=window)
    assert window.frame_indices == [0, 1, 2]


def test_non_strict_window_keeps_degraded_frames(small_sim, cams):
    window = seed_window(seeds_of(small_sim))
    cfg = PoseConfig(workers=1, max_consecutive_unavailable=100)
    run_sequence(small_sim.frames[3:6], None, cams, cfg, UnavailableClient(), window=window)
    assert window.frame_indices == [3, 4, 5]


def test_needs_seeds_or_window(small_sim, cams):
    with pytest.raises(ValueError):
        run_sequence(small_sim.frames[3:4], None, cams, PoseConfig(workers=1), UnavailableClient())


def test_unknown_ablation():
    with pytest.raises(ValueError):
        PoseConfig(ablation="fast")


@pytest.fixture(scope="module")
def swapped_bench(rig):
    sim = make_sim(rig, 60, seed=11)
    return sim, PoseTruth.from_sim(sim)


def test_ablation_ordering_on_small_benchmark(swapped_bench, cams):
    sim, truth = swapped_bench
    corr = CorruptionSpec(p_swap=0.15, p_swap_global=0.05)
    errs = {}
    for ablation in ("full", "no-refine", "naive"):
        client = OracleClient(truth, corruption=corr, seed=2)
        errs[ablation] = _mean_3d_error(sim, _run(sim, cams, PoseConfig(ablation=ablation, workers=4), client))
    assert errs["full"] < errs["no-refine"] < errs["naive"]


def test_refinement_repairs_most_injected_swaps(swapped_bench, cams):
    sim, truth = swapped_bench
    client = OracleClient(truth, corruption=CorruptionSpec(p_swap=0.15), seed=2)
    results = {r.frame_index: r for r in _run(sim, cams, PoseConfig(workers=4), client)}
    events = client.swap_events
    assert events
    fixed = sum(
        results[f].state.get(v, a) == sim.truth[f][v][a] and results[f].state.get(v, b) == sim.truth[f][v][b]
        for f, v, a, b in events
    )
    assert fixed / len(events) >= 0.7

