from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperwalker.errors import ContractViolation, EmptyIndexError
from hyperwalker.fusion import FusionParameters, fuse
from hyperwalker.ibrochure import HypergraphStore
from hyperwalker.navigator import (
    STOP,
    AlignmentObjective,
    Case,
    CosinePolicy,
    EpisodeTrace,
    NavigationConfig,
    TTTConfig,
    Triplet,
    UniformPolicy,
    check_leakage,
    gather_triplets,
    linger_orthogonalize,
    run_episode,
    ttt_step,
)
from hyperwalker.walker import PolicyParameters

from conftest import unit


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# -- linger --------------------------------------------------------------------

@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_linger_output_is_orthogonal_unit(seed, k):
    rng = np.random.default_rng(seed)
    q, sel = unit(rng, 8), unit(rng, 8, k)
    out, fallback = linger_orthogonalize(q, sel)
    assert not fallback
    assert abs(cos(out, sel.mean(axis=0))) <= 1e-12
    assert np.linalg.norm(out) == pytest.approx(1.0)


def test_linger_parallel_query_falls_back():
    q = np.array([0.0, 1.0, 0.0])
    out, fallback = linger_orthogonalize(q, [q, q])
    assert fallback and np.array_equal(out, q)


def test_linger_cancelling_selections_fall_back():
    q = np.array([0.6, 0.8])
    out, fallback = linger_orthogonalize(q, [[1.0, 0.0], [-1.0, 0.0]])
    assert fallback and np.array_equal(out, q)


def test_linger_needs_a_selection():
    with pytest.raises(ContractViolation):
        linger_orthogonalize(np.ones(3), np.zeros((0, 3)))


# -- episodes ------------------------------------------------------------------

def cases(world, n=None):
    out = world["split"].test + world["split"].train
    return out if n is None else out[:n]


def test_trace_structure(small_world):
    store, fusion = small_world["store"], small_world["fusion"]
    case = cases(small_world)[0]
    t = run_episode(case, store, UniformPolicy(), fusion, NavigationConfig(allow_stop=False), rng_seed=3)
    assert t.h == len(t.selected_set) == 5
    assert len(set(t.selected_set)) == 5
    for i, hop in enumerate(t.hops):
        assert hop.hop_index == i
        assert len(hop.candidate_ids) == len(hop.candidate_source) == len(hop.candidate_depth)
        assert set(hop.candidate_source) <= {"Index", "Expansion"}
        assert not set(hop.candidate_ids) & set(t.selected_set[:i])
        assert hop.chosen == t.selected_set[i]
        if i == 0:
            assert set(hop.candidate_source) == {"Index"}
    np.testing.assert_allclose(t.reward_query, fuse(case.z_img, case.z_ehr, fusion))


def test_seeded_episodes_reproduce(small_world):
    store, fusion = small_world["store"], small_world["fusion"]
    case = cases(small_world)[1]
    p = PolicyParameters.init(16, 16, seed=0)
    cfg = NavigationConfig(temperature=1.0)
    a = run_episode(case, store, p, fusion, cfg, rng_seed=42)
    b = run_episode(case, store, p, fusion, cfg, rng_seed=42)
    assert a.to_json() == b.to_json()


def test_greedy_oracle_first_pick_is_nearest(small_world):
    store, fusion = small_world["store"], small_world["fusion"]
    case = cases(small_world)[2]
    t = run_episode(case, store, CosinePolicy(), fusion, NavigationConfig(greedy=True, allow_stop=False))
    q = fuse(case.z_img, case.z_ehr, fusion)
    best = max(t.hops[0].candidate_ids, key=lambda i: float(store.nodes[i].embedding @ q))
    assert t.selected_set[0] == best


def test_stop_first_gives_degenerate_episode(small_world):
    p = PolicyParameters.zeros(16, 4)
    p.stop_score[...] = 100.0
    t = run_episode(cases(small_world)[0], small_world["store"], p, small_world["fusion"],
                    NavigationConfig(greedy=True))
    assert t.degenerate and t.rewards is None and t.total == 0.0
    assert t.hops[0].chosen == STOP


def test_no_linger_reuses_the_fused_query(small_world):
    store, fusion = small_world["store"], small_world["fusion"]
    case = cases(small_world)[0]
    t = run_episode(case, store, UniformPolicy(), fusion, NavigationConfig(linger=False, allow_stop=False), 1)
    for hop in t.hops:
        np.testing.assert_array_equal(hop.query, t.reward_query)


def test_linger_queries_are_orthogonal_to_selection_mean(small_world):
    store, fusion = small_world["store"], small_world["fusion"]
    for i, case in enumerate(cases(small_world, 10)):
        t = run_episode(case, store, UniformPolicy(), fusion, NavigationConfig(allow_stop=False), i)
        for k, hop in enumerate(t.hops[1:], start=1):
            if not hop.linger_fallback:
                mean = store.embeddings(t.selected_set[:k]).astype(np.float64).mean(axis=0)
                assert abs(cos(np.asarray(hop.query), mean)) <= 1e-6


def test_trace_json_round_trip_and_replay(small_world):
    store, fusion = small_world["store"], small_world["fusion"]
    t = run_episode(cases(small_world)[3], store, UniformPolicy(), fusion, NavigationConfig(allow_stop=False), 9)
    back = EpisodeTrace.from_json(json.loads(json.dumps(t.to_json())))
    assert back == t
    replay = back.replay_rewards(store)
    for k, v in t.rewards.items():
        assert replay[k] == pytest.approx(v, abs=1e-12)


def test_decisions_rebuild_the_sampling_distribution(small_world):
    store, fusion = small_world["store"], small_world["fusion"]
    p = PolicyParameters.init(16, 8, seed=1)
    t = run_episode(cases(small_world)[0], store, p, fusion, NavigationConfig(temperature=1.0), 5)
    decs = t.decisions(store)
    assert len(decs) == len(t.hops)
    for dec, hop in zip(decs, t.hops):
        chosen = STOP if dec.chosen == len(hop.candidate_ids) else hop.candidate_ids[dec.chosen]
        assert chosen == hop.chosen


def test_empty_store_is_an_error():
    case = Case("c", np.ones(4), np.ones(4))
    with pytest.raises(EmptyIndexError):
        run_episode(case, HypergraphStore(4), UniformPolicy(), FusionParameters.identity(4, 3))


def test_navigation_config_validation():
    with pytest.raises(ContractViolation):
        NavigationConfig(k_candidates=0)
    with pytest.raises(ContractViolation):
        NavigationConfig(expansion_depth=6)


# -- TTT -----------------------------------------------------------------------

def triplets_from(rng, n, dim=16, study="other"):
    return [Triplet(f"{study}{i}", "p", unit(rng, dim), unit(rng, dim), unit(rng, dim)) for i in range(n)]


def test_ttt_step_leaves_input_params_untouched(rng):
    p = FusionParameters.identity(16, 32, seed=0)
    before = p.to_bytes()
    res = ttt_step(p, triplets_from(rng, 3))
    assert p.to_bytes() == before
    assert res.status == "ok" and res.loss_after < res.loss_before
    assert np.array_equal(res.params.W1, p.W1) and np.array_equal(res.params.b1, p.b1)
    assert not np.array_equal(res.params.b_beta, p.b_beta)


def test_ttt_step_moves_each_adapter_entry_by_about_lr(rng):
    p = FusionParameters.identity(16, 32, seed=0, dtype=np.float64)
    res = ttt_step(p, triplets_from(rng, 2))
    delta = np.abs(res.params.b_beta - p.b_beta)
    assert np.all(delta <= 1e-5 * (1 + 1e-6))


def test_ttt_without_triplets_is_skipped():
    p = FusionParameters.identity(4, 3)
    res = ttt_step(p, [])
    assert res.status == "no-triplets" and res.loss_before is None


def test_alignment_loss_definition(rng):
    p = FusionParameters.identity(8, 4, seed=0)
    ts = triplets_from(rng, 3, dim=8)
    want = np.mean([1 - cos(fuse(t.z_img, t.z_ehr, p), t.z_report) for t in ts])
    assert AlignmentObjective().loss(p, ts) == pytest.approx(want)


def test_leakage_check_flags_the_case_study(rng):
    ts = triplets_from(rng, 3)
    ts.append(Triplet("case-1", "p", unit(rng, 16), unit(rng, 16), unit(rng, 16)))
    leaks = check_leakage("case-1", ts)
    assert [t.study_id for t in leaks] == ["case-1"]
    assert check_leakage("case-2", ts) == []


def test_gather_triplets_excludes_the_case(small_world):
    store = small_world["store"]
    studies = sorted({n.study_id for n in store.nodes.values() if n.modality.value == "report"})
    got = gather_triplets(store, studies, exclude_study=studies[0], limit=3)
    assert len(got) == 3
    assert studies[0] not in {t.study_id for t in got}


def test_episode_with_ttt_never_mutates_shared_fusion(small_world):
    store = small_world["store"]
    fusion = FusionParameters.identity(16, 32, seed=0)
    before = fusion.to_bytes()
    nav = NavigationConfig(ttt=TTTConfig(enabled=True), allow_stop=False)
    t = run_episode(cases(small_world)[0], store, CosinePolicy(), fusion, replace(nav, greedy=True))
    assert fusion.to_bytes() == before
    assert t.ttt["status"] == "ok"
    assert cases(small_world)[0].study_id not in t.ttt["studies"]
