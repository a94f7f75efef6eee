"""Fixed-policy learning on a compressed channel, compared with the exact answer.

Two players share a crowded pair of locations but only see their own
location plus a coarse "is it crowded" flag. Holding one soft joint policy
fixed, their Q-learning and value-estimation tables settle on the
functions of an approximate belief MDP, which this script computes exactly
and prints next to the learned tables.
"""

import numpy as np

from mfglab.exact import analyze_joint
from mfglab.fixtures import fixture
from mfglab.learners import run_naive_learning
from mfglab.policy import build_quantization

game = fixture("crowd2_compressed")
policies = build_quantization(game, resolution=2, softness_floor=0.05, kernel_space="local")
joint = policies.joint((4, 1))

print(f"{game.name}: {game.n_observations} observations, {len(policies)} policies in the shared set")
exact = analyze_joint(game, joint)

for steps in (10**3, 10**4, 10**5, 10**6):
    res = run_naive_learning(game, joint, steps, seed=1)
    err = max(
        float(np.max(np.abs(res.q_bar[i][f.reachable] - f.w[f.reachable]))) for i, f in enumerate(exact)
    )
    print(f"  after {steps:>8} steps: largest Q-table error {err:.4f}")

f = exact[0]
print("\nplayer 0, exact Q-factors per observation (stay, switch):")
for y in np.flatnonzero(f.reachable):
    print(f"  y={y}: {f.w[y].round(4)}   own-policy value {f.v[y]:.4f}")
