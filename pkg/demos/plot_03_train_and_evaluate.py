"""
Training the walker with REINFORCE
==================================

The walker starts from a random policy and is trained on the training
studies of a planted manifold, then compared with simple baselines on the
test studies. Expect about a minute on one core.

The command-line equivalent is::

    python3 -m hyperwalker gen --out m.jsonl --dims 32 --subjects 100 --conditions 8
    python3 -m hyperwalker build --records m.jsonl --out store --graph-frac 0.5 --train-frac 0.25
    python3 -m hyperwalker train --store store --out policy.hwpl --log train.jsonl
    python3 -m hyperwalker evaluate --store store --policy policy.hwpl --no-rdiv
"""

import time

import numpy as np

from hyperwalker.fusion import FusionParameters
from hyperwalker.navigator import NavigationConfig
from hyperwalker.walker import PolicyParameters
from hyperwalker.workbench import (
    SyntheticSpec,
    TrainConfig,
    build_store,
    evaluate,
    generate_manifold,
    split_studies,
    train_policy,
)

spec = SyntheticSpec(dims=32, n_subjects=100, studies_per_subject=4, n_conditions=8, seed=0)
records, truth = generate_manifold(spec)
split = split_studies(records, graph_frac=0.5, train_frac=0.25, seed=0)
store = build_store(split.graph)
fusion = FusionParameters.identity(32, 512)
nav = NavigationConfig()
print(len(store.nodes), "nodes,", len(split.train), "training cases,", len(split.test), "test cases")

###############################################################################
# Before training

before = evaluate(store, PolicyParameters.init(32, 256, seed=0), fusion, split.test, truth, nav=nav,
                  walker_name="walker (random init)")
print(before.table())

###############################################################################
# Training
#
# Sampling temperature decays from 1.0 to the evaluation temperature over the
# first half of training; the reward baseline is an exponential moving average.

t0 = time.perf_counter()
policy, log = train_policy(store, fusion, split.train, nav, TrainConfig(episodes=2000, seed=0))
print(f"trained in {time.perf_counter() - t0:.0f}s")
rewards = np.array([row["reward"] for row in log])
for start in range(0, 2000, 400):
    print(f"episodes {start:>4}-{start + 399}: mean reward {rewards[start:start + 400].mean():.3f}")

###############################################################################
# After training

after = evaluate(store, policy, fusion, split.test, truth, nav=nav)
print(after.table())
gain = after.row("walker").mean_total - before.row("walker (random init)").mean_total
print(f"reward gain over the random-init policy: {gain:+.3f}")
