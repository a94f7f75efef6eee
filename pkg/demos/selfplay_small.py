"""Independent learners revising policies between exploration phases.

Uses the "switch" game, whose subjective gaps are well separated, so that
modest phase lengths suffice. Prints the tolerance constants, then runs a
short batch of self-play runs and reports how many end in equilibrium.
"""

import tempfile

from mfglab.harness import ExperimentConfig, resolve_setup, run_experiment, tolerance_for

config = ExperimentConfig.for_fixture(
    "switch2_global", mode="selfplay", phase_length=4096, n_phases=60, n_seeds=20
)
report = tolerance_for(config, resolve_setup(config))
print("tolerance constants:", {k: v for k, v in report.to_dict().items() if k != "gap_set_size"})

with tempfile.TemporaryDirectory() as out:
    summary = run_experiment(config, base_seed=0, out=out)
agg = summary.aggregate
print(f"\n{agg['n_runs']} runs, phase length {agg['phase_length']}:"
      f" {agg['frequency']:.2f} ended in an equilibrium"
      f" (95% Wilson interval {agg['wilson_low']:.2f} to {agg['wilson_high']:.2f})")
