"""Satisficing at the level of policies, with exact satisfaction flags.

Enumerates every profile of a 9-member shared policy set, finds the
profiles where everyone is subjectively satisfied, builds a satisficing
path into that set from a chosen start and then lets random "explore when
unhappy" revisions run from every start.
"""

import numpy as np

from mfglab.exact import ProfileTable
from mfglab.fixtures import fixture
from mfglab.policy import build_quantization
from mfglab.satisficing import (
    construct_satisficing_path,
    run_oracle_dynamics_batch,
    subjective_equilibrium_set,
    verify_satisficing_path,
)

EPS = 0.15
game = fixture("crowd2_global")
policies = build_quantization(game, kernel_space="local")
table = ProfileTable(game, policies)

equilibria = subjective_equilibrium_set(game, policies, EPS, table)
print(f"{len(equilibria)} of {table.n_profiles} profiles are subjective {EPS}-equilibria: {equilibria}")

start = (0, 8)
path = construct_satisficing_path(game, policies, EPS, start, table)
print(f"\npath from {start}:")
for prof, flags in zip(path.profiles, path.satisfied):
    print(f"  {prof}  satisfied={flags}")
print("valid:", bool(verify_satisficing_path(game, policies, EPS, path, require_terminal=True, table=table)))

starts = np.repeat(np.array(list(table.profiles())), 200, axis=0)
stats = run_oracle_dynamics_batch(table, EPS, [0.5, 0.5], starts, 1000, seed=0)
hit = stats.hitting_times[stats.hitting_times >= 0]
print(f"\nrandom revisions: {stats.hit_fraction:.3f} of {len(starts)} runs reached the set,"
      f" median {np.median(hit):.0f} steps, {int(stats.left_after_hit.sum())} left it afterwards")
