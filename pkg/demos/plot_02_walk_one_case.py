"""
Walking one case through the hypergraph
=======================================

A held-out study becomes a query: its image and EHR embeddings are fused,
then the walker selects evidence hop by hop. Between hops the query is
orthogonalized against what was already picked (linger), which pushes later
hops towards complementary evidence.
"""

import json

import numpy as np

from hyperwalker.fusion import FusionParameters, fuse
from hyperwalker.navigator import CosinePolicy, EpisodeTrace, NavigationConfig, TTTConfig, UniformPolicy, run_episode
from hyperwalker.workbench import SyntheticSpec, build_store, generate_manifold, split_studies

spec = SyntheticSpec(dims=32, n_subjects=60, studies_per_subject=4, seed=1)
records, truth = generate_manifold(spec)
split = split_studies(records, graph_frac=0.5, train_frac=0.25, seed=0)
store = build_store(split.graph)
case = split.test[0]
print("case", case.case_id, "has", len(truth[case.case_id]), "planted evidence nodes in the store")

# identity-initialized fusion ignores the EHR side until it is trained or adapted
fusion = FusionParameters.identity(32, 512)
q = fuse(case.z_img, case.z_ehr, fusion)
print("fused query norm", np.linalg.norm(q).round(6))

###############################################################################
# A greedy cosine walk with linger

nav = NavigationConfig(greedy=True, allow_stop=False)
trace = run_episode(case, store, CosinePolicy(), fusion, nav)
for hop in trace.hops:
    src = sorted(set(hop.candidate_source))
    hit = "planted" if hop.chosen in truth[case.case_id] else ""
    print(f"hop {hop.hop_index}: {len(hop.candidate_ids):>3} candidates from {src}, picked {hop.chosen} {hit}")
print("rewards", {k: round(v, 3) for k, v in trace.rewards.items()})

# the same walk without linger keeps re-asking the same question
flat = run_episode(case, store, CosinePolicy(), fusion, NavigationConfig(greedy=True, allow_stop=False,
                                                                          linger=False))
print("R_div with linger", round(trace.rewards["r_div"], 3), "without", round(flat.rewards["r_div"], 3))

###############################################################################
# Test-time training after the first hop
#
# One AdamW step on a private copy of the fusion parameters, using complete
# triplets from retrieved studies. The case's own study is never used.

ttt = run_episode(case, store, CosinePolicy(), fusion, NavigationConfig(greedy=True, allow_stop=False,
                                                                         ttt=TTTConfig(enabled=True)))
print(json.dumps({k: v for k, v in ttt.ttt.items() if k != "studies"}, indent=1))

###############################################################################
# Traces are plain JSON and replay to the same rewards

sampled = run_episode(case, store, UniformPolicy(), fusion, nav, rng_seed=3)
blob = json.dumps(sampled.to_json())
again = EpisodeTrace.from_json(json.loads(blob)).replay_rewards(store)
print(len(blob), "bytes of trace JSON, replayed total", round(again["total"], 6), "stored", round(sampled.total, 6))
