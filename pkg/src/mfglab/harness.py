"""Configuration-driven experiments.

Every mode writes ``summary.csv`` (one row per run or start),
``events.jsonl`` and ``manifest.json`` (all resolved parameters) into the
output directory, plus mode-specific tables. Given the same configuration and
base seed, these files are byte-identical across invocations; wall-clock
timings go to ``timing.json``, which is outside that guarantee.

Per-run randomness derives from ``SeedSequence(base_seed, spawn_key=(run,
kind, player, phase))``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml
from scipy.stats import binomtest

from . import exact, learners, satisficing
from .errors import ConfigError, EmptyEquilibriumError
from .fixtures import FIXTURES, fixture
from .game import GameSpec, ObservationChannel
from .policy import QuantizedPolicySet, build_quantization

MODES = ("solve", "naive-learn", "oracle-dynamics", "paths", "selfplay", "sweep", "tolerance")
START = 4

# Defaults per built-in fixture: epsilon sits in a wide gap of the fixture's
# subjective-gap set for the 9-member local quantization (m=2, floor 0.05).
PRESETS: dict[str, dict[str, Any]] = {
    "crowd2_global": {"epsilon": 0.15},
    "crowd2_mean_field": {"epsilon": 0.15},
    "crowd2_compressed": {"epsilon": 0.15},
    "crowd2_local": {"epsilon": 0.15},
    "crowd3_mean_field": {"epsilon": 0.15},
    "crowd4_compressed": {"epsilon": 0.15, "restrict_to": [0]},
    "switch2_global": {"epsilon": 0.243},
    "switch2_mean_field": {"epsilon": 0.243},
    "switch2_compressed": {"epsilon": 0.243},
    "switch3_mean_field": {"epsilon": 0.24, "revision_probs": 0.8, "n_phases": 80},
    "switch4_compressed": {"epsilon": 0.24, "restrict_to": [0]},
    "trivial1": {"epsilon": 0.1, "kernel_space": "observation", "softness_floor": 0.0},
}


@dataclass
class ExperimentConfig:
    mode: str = "solve"
    game: str = "crowd2_global"
    channel: dict | None = None
    resolution: int = 2
    softness_floor: float = 0.05
    kernel_space: str = "local"
    restrict_to: list[int] | None = None
    epsilon: float = 0.15
    tolerances: Any = "auto"  # float, per-player list, or "auto" (half of d_bar)
    revision_probs: Any = 0.5
    phase_length: Any = "auto"  # int, list of ints, or "auto" (phase_length_search)
    n_phases: int = 150
    n_seeds: int = 20
    strict_visitation: bool = False
    profile: list[int] | None = None
    steps: int = 10**6
    max_steps: int = 1000
    search_xi: float = 0.1
    search_max_T: int = 2**20
    search_seeds: int = 20
    search_profiles: int = 64
    workers: int = 1
    out: str = "runs"
    sweep: dict[str, list] | None = None
    sweep_mode: str = "selfplay"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.resolution < 1:
            raise ConfigError("resolution must be at least 1")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")
        if self.n_seeds < 1 or self.n_phases < 1 or self.steps < 1:
            raise ConfigError("n_seeds, n_phases and steps must be positive")
        if self.mode == "sweep":
            if not self.sweep:
                raise ConfigError("sweep mode needs a 'sweep' mapping of field -> values")
            if self.sweep_mode not in MODES or self.sweep_mode == "sweep":
                raise ConfigError(f"invalid sweep_mode {self.sweep_mode!r}")
            known = {f.name for f in dataclasses.fields(self)}
            bad = set(self.sweep) - known
            if bad:
                raise ConfigError(f"sweep over unknown fields {sorted(bad)}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown configuration fields {sorted(extra)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def for_fixture(cls, name: str, **overrides) -> "ExperimentConfig":
        if name not in FIXTURES:
            raise ConfigError(f"unknown fixture {name!r}")
        data = {"game": name, **PRESETS.get(name, {}), **overrides}
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path) -> ExperimentConfig:
    """Read an experiment configuration from JSON or YAML."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    return ExperimentConfig.from_dict(data)


def load_game(path) -> GameSpec:
    """Read a game description (JSON or YAML) with explicit table fields."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read game file {path}: {exc}") from None
    return game_from_dict(data)


def game_from_dict(data: dict) -> GameSpec:
    required = ["n_players", "n_local_states", "n_actions", "discount", "cost_table", "transition_table", "initial_dist"]
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"game description lacks {missing}")
    ch = data.get("channel", {"variant": "global"})
    try:
        channel = ObservationChannel(ch["variant"], ch.get("k"), ch.get("f_table"))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed channel {ch!r}: {exc}") from None
    return GameSpec(
        int(data["n_players"]),
        int(data["n_local_states"]),
        int(data["n_actions"]),
        float(data["discount"]),
        np.asarray(data["cost_table"], dtype=float),
        np.asarray(data["transition_table"], dtype=float),
        np.asarray(data["initial_dist"], dtype=float),
        channel,
        str(data.get("name", "")),
    )


def save_game(game: GameSpec, path) -> None:
    Path(path).write_text(json.dumps(game.to_dict(), indent=1))


# -- resolution of configuration --------------------------------------------

@dataclass
class Setup:
    game: GameSpec
    qset: QuantizedPolicySet
    table: exact.ProfileTable | None = None

    def profile_table(self) -> exact.ProfileTable:
        if self.table is None:
            self.table = exact.ProfileTable(self.game, self.qset)
        return self.table


def resolve_game(config: ExperimentConfig) -> GameSpec:
    game = fixture(config.game) if config.game in FIXTURES else load_game(config.game)
    if config.channel:
        ch = config.channel
        game = game.with_channel(ObservationChannel(ch["variant"], ch.get("k"), ch.get("f_table")))
    return game


def resolve_setup(config: ExperimentConfig) -> Setup:
    game = resolve_game(config)
    qset = build_quantization(
        game,
        resolution=config.resolution,
        softness_floor=config.softness_floor,
        kernel_space=config.kernel_space,
        restrict_to=config.restrict_to,
    )
    return Setup(game, qset)


def _per_player(value, n: int, name: str) -> list[float]:
    if isinstance(value, (int, float)):
        return [float(value)] * n
    vals = [float(v) for v in value]
    if len(vals) != n:
        raise ConfigError(f"{name} needs {n} entries, got {len(vals)}")
    return vals


# -- statistics --------------------------------------------------------------

def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    if trials == 0:
        return (0.0, 1.0)
    ci = binomtest(successes, trials).proportion_ci(confidence_level=confidence, method="wilson")
    return (float(ci.low), float(ci.high))


def u_star(p_min: float, xi: float) -> float:
    """Threshold above which ``u p / (1 - u + u p) > 1 - xi / 2``."""
    a = 1.0 - xi / 2.0
    return a / (a + p_min * (1.0 - a))


@dataclass
class PhaseLengthResult:
    phase_length: int
    frequency: float
    threshold: float
    achieved: bool
    history: list[tuple[int, float]] = field(default_factory=list)


def accuracy_frequency(
    setup: Setup,
    accuracy: float,
    phase_length: int,
    profiles: Sequence[Sequence[int]],
    n_seeds: int,
    base_seed: int,
    oracle_cache: dict | None = None,
) -> float:
    """Fraction of (profile, seed) pairs whose end-of-phase tables are all within ``accuracy``."""
    game, qset = setup.game, setup.qset
    cache = oracle_cache if oracle_cache is not None else {}
    reach = game.reachable_observations
    good = total = 0
    for p_idx, prof in enumerate(profiles):
        prof = tuple(int(k) for k in prof)
        if prof not in cache:
            cache[prof] = exact.analyze_joint(game, qset.joint_kernels(prof))
        funcs = cache[prof]
        kernels = qset.joint_kernels(prof)
        for sd in range(n_seeds):
            run = p_idx * n_seeds + sd
            sim = learners.PhaseSimulator(game)
            s0 = learners.sample_index(
                np.cumsum(game.initial_dist), learners.stream(base_seed, run, learners.INIT).random()
            )
            acts = [learners.stream(base_seed, run, learners.ACTIONS, i) for i in range(game.n_players)]
            sim.run(s0, kernels, phase_length, acts, learners.stream(base_seed, run, learners.ENV))
            ok = all(
                np.max(np.abs(sim.q[i][reach[i]] - funcs[i].w[reach[i]])) < accuracy
                and np.max(np.abs(sim.j[i][reach[i]] - funcs[i].v[reach[i]])) < accuracy
                for i in range(game.n_players)
            )
            good += ok
            total += 1
    return good / total


def phase_length_search(
    config: ExperimentConfig,
    xi: float | None = None,
    max_T: int | None = None,
    base_seed: int = 0,
    setup: Setup | None = None,
    report: exact.ToleranceReport | None = None,
    start_T: int = 1,
) -> PhaseLengthResult:
    """Smallest power-of-two phase length whose learning-accuracy frequency beats ``u*``.

    Accuracy means every player's end-of-phase tables lie within the
    report's ``xi_accuracy`` of the exact subjective functions, over a sample
    of profiles and seeds.
    """
    xi = config.search_xi if xi is None else xi
    max_T = config.search_max_T if max_T is None else max_T
    setup = setup or resolve_setup(config)
    report = report or tolerance_for(config, setup)
    if report.xi_accuracy is None or report.xi_accuracy <= 0:
        raise ConfigError("tolerance report has no positive accuracy target; check epsilon and tolerances")
    threshold = u_star(report.p_min, xi)
    table = setup.profile_table()
    all_profiles = list(table.profiles())
    if len(all_profiles) > config.search_profiles:
        rng = np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(0, 9)))
        pick = rng.choice(len(all_profiles), size=config.search_profiles, replace=False)
        all_profiles = [all_profiles[k] for k in sorted(pick)]
    cache: dict = {}
    history = []
    T = max(1, int(start_T))
    best = (T, 0.0)
    while T <= max_T:
        freq = accuracy_frequency(setup, report.xi_accuracy, T, all_profiles, config.search_seeds, base_seed, cache)
        history.append((T, freq))
        if freq > best[1]:
            best = (T, freq)
        if freq >= threshold:
            return PhaseLengthResult(T, freq, threshold, True, history)
        T *= 2
    return PhaseLengthResult(best[0], best[1], threshold, False, history)


def tolerance_for(config: ExperimentConfig, setup: Setup) -> exact.ToleranceReport:
    n = setup.game.n_players
    table = setup.profile_table()
    e = _per_player(config.revision_probs, n, "revision_probs")
    if config.tolerances == "auto":
        probe = exact.tolerance_report(setup.game, setup.qset, config.epsilon, [0.0] * n, e, table, path_bound=0)
        if probe.d_bar is None:
            raise ConfigError("gap set has no nonzero entry; d_bar is undefined")
        d = [probe.d_bar / 2.0] * n
    else:
        d = _per_player(config.tolerances, n, "tolerances")
    return exact.tolerance_report(setup.game, setup.qset, config.epsilon, d, e, table)


# -- self-play workers -------------------------------------------------------

def _selfplay_chunk(args) -> list[dict]:
    game, qset, schedule, eps, d, e, strict, base_seed, runs = args
    out = []
    for run in runs:
        rng = np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(run, START)))
        start = [int(k) for k in rng.integers(len(qset), size=game.n_players)]
        res = learners.independent_learning_run(
            game, qset, schedule, eps, d, e, start, base_seed, strict=strict, run=run
        )
        out.append(
            {
                "run": run,
                "start": start,
                "final": list(res.final_profile),
                "events": res.events,
                "satisfied_last": [bool(x) for x in res.satisfied[-1]],
            }
        )
    return out


def run_selfplay_runs(
    game, qset, schedule, eps, d, e, strict, base_seed, n_runs, workers=1
) -> list[dict]:
    runs = list(range(n_runs))
    if workers <= 1:
        return _selfplay_chunk((game, qset, schedule, eps, d, e, strict, base_seed, runs))
    chunks = [runs[k::workers] for k in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_selfplay_chunk, [(game, qset, schedule, eps, d, e, strict, base_seed, c) for c in chunks]))
    merged = [r for part in parts for r in part]
    return sorted(merged, key=lambda r: r["run"])


# -- output ------------------------------------------------------------------

@dataclass
class RunSummary:
    mode: str
    rows: list[dict]
    aggregate: dict
    out_dir: Path
    events: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def frequency(self) -> float | None:
        return self.aggregate.get("frequency")


def _write_outputs(out: Path, config: ExperimentConfig, base_seed: int, summary: RunSummary, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with (out / "summary.csv").open("w", newline="") as fh:
        if summary.rows:
            cols = ["schema"] + list(summary.rows[0])
            wr = csv.DictWriter(fh, fieldnames=cols)
            wr.writeheader()
            for row in summary.rows:
                wr.writerow({"schema": "v1", **{k: _cell(v) for k, v in row.items()}})
    with (out / "events.jsonl").open("w") as fh:
        for ev in summary.events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    manifest = {
        "schema": "v1",
        "mode": summary.mode,
        "base_seed": base_seed,
        "config": config.to_dict(),
        "resolved": extra,
        "aggregate": summary.aggregate,
        "seed_derivation": "SeedSequence(base_seed, spawn_key=(run, kind, player, phase))",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_json_default))
    (out / "timing.json").write_text(json.dumps({"wall_clock_seconds": summary.wall_clock}))


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(_cell(x)) for x in v)
    return v


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def run_experiment(
    config: ExperimentConfig,
    base_seed: int = 0,
    out: str | Path | None = None,
    workers: int | None = None,
) -> RunSummary:
    """Run one experiment and write its summary, events and manifest."""
    out_dir = Path(out or config.out)
    workers = config.workers if workers is None else workers
    tic = time.perf_counter()
    handler = _HANDLERS[config.mode]
    summary, extra = handler(config, base_seed, out_dir, workers)
    summary.wall_clock = time.perf_counter() - tic
    _write_outputs(out_dir, config, base_seed, summary, extra)
    return summary


def _mode_solve(config, base_seed, out_dir, workers):
    setup = resolve_setup(config)
    game = setup.game
    prof = config.profile or [0] * game.n_players
    joint = setup.qset.joint(prof)
    out_dir.mkdir(parents=True, exist_ok=True)
    exact.write_value_tables_csv(out_dir / "tables.csv", game, joint)
    funcs = exact.analyze_joint(game, joint)
    rows = []
    for i, f in enumerate(funcs):
        rows.append({"player": i, "subjective_gap": float(np.max(f.gaps())), "soft": f.soft_flag})
    return RunSummary("solve", rows, {"profile": list(prof)}, out_dir), {"profile": list(prof)}


def _mode_naive(config, base_seed, out_dir, workers):
    setup = resolve_setup(config)
    game = setup.game
    prof = config.profile or [0] * game.n_players
    kernels = setup.qset.joint_kernels(prof)
    funcs = exact.analyze_joint(game, kernels)
    reach = game.reachable_observations
    rows = []
    for run in range(config.n_seeds):
        res = learners.run_naive_learning(game, kernels, config.steps, base_seed, run=run)
        for i in range(game.n_players):
            rows.append(
                {
                    "run": run,
                    "player": i,
                    "q_error": float(np.max(np.abs(res.q_bar[i][reach[i]] - funcs[i].w[reach[i]]))),
                    "j_error": float(np.max(np.abs(res.j_bar[i][reach[i]] - funcs[i].v[reach[i]]))),
                }
            )
    agg = {
        "max_q_error": max(r["q_error"] for r in rows),
        "max_j_error": max(r["j_error"] for r in rows),
    }
    return RunSummary("naive-learn", rows, agg, out_dir), {"profile": list(prof)}


def _mode_oracle(config, base_seed, out_dir, workers):
    setup = resolve_setup(config)
    table = setup.profile_table()
    n = setup.game.n_players
    e = _per_player(config.revision_probs, n, "revision_probs")
    if not table.equilibrium_mask(config.epsilon).any():
        raise EmptyEquilibriumError(f"no subjective {config.epsilon}-equilibrium in the policy set")
    starts = np.array(list(table.profiles()), dtype=np.int64)
    reps = np.repeat(starts, config.n_seeds, axis=0)
    stats = satisficing.run_oracle_dynamics_batch(table, config.epsilon, e, reps, config.max_steps, base_seed)
    rows = []
    for k, prof in enumerate(starts):
        h = stats.hitting_times[k * config.n_seeds:(k + 1) * config.n_seeds]
        left = stats.left_after_hit[k * config.n_seeds:(k + 1) * config.n_seeds]
        rows.append(
            {
                "start": list(int(x) for x in prof),
                "hit_fraction": float(np.mean(h >= 0)),
                "mean_hitting_time": float(np.mean(h[h >= 0])) if np.any(h >= 0) else float("nan"),
                "left_after_hit": int(left.sum()),
            }
        )
    agg = {
        "min_hit_fraction": min(r["hit_fraction"] for r in rows),
        "runs_left_after_hit": int(stats.left_after_hit.sum()),
    }
    return RunSummary("oracle-dynamics", rows, agg, out_dir), {"revision_probs": e}


def _mode_paths(config, base_seed, out_dir, workers):
    setup = resolve_setup(config)
    game, qset, table = setup.game, setup.qset, setup.profile_table()
    rows, paths = [], {}
    for prof in table.profiles():
        path = satisficing.construct_satisficing_path(game, qset, config.epsilon, prof, table)
        check = satisficing.verify_satisficing_path(game, qset, config.epsilon, path, True, table)
        paths[prof] = path
        rows.append({"start": list(prof), "length": len(path), "valid": check.ok})
    out_dir.mkdir(parents=True, exist_ok=True)
    satisficing.write_paths_json(out_dir / "paths.json", paths)
    agg = {"max_length": max(r["length"] for r in rows), "all_valid": all(r["valid"] for r in rows)}
    return RunSummary("paths", rows, agg, out_dir), {}


def _mode_tolerance(config, base_seed, out_dir, workers):
    setup = resolve_setup(config)
    report = tolerance_for(config, setup)
    out_dir.mkdir(parents=True, exist_ok=True)
    exact.write_tolerance_csv(out_dir / "tolerance.csv", report)
    return RunSummary("tolerance", [report.to_dict()], report.to_dict(), out_dir), {}


def _mode_selfplay(config, base_seed, out_dir, workers):
    setup = resolve_setup(config)
    game, qset, table = setup.game, setup.qset, setup.profile_table()
    eq_mask = table.equilibrium_mask(config.epsilon)
    if not eq_mask.any():
        raise EmptyEquilibriumError(
            f"no subjective {config.epsilon}-equilibrium in the policy set; self-play refused"
        )
    report = tolerance_for(config, setup)
    if config.strict_visitation and report.flagged_players:
        raise ConfigError(f"tolerances of players {report.flagged_players} lie outside (0, d_bar)")
    e = list(report.revision_probs)
    d = list(report.player_tolerances)
    if config.phase_length == "auto":
        search = phase_length_search(config, setup=setup, report=report, base_seed=base_seed)
        lengths = (search.phase_length,) * config.n_phases
        search_info = dataclasses.asdict(search)
    elif isinstance(config.phase_length, int):
        lengths = (config.phase_length,) * config.n_phases
        search_info = None
    else:
        lengths = tuple(int(t) for t in config.phase_length)
        search_info = None
    schedule = learners.PhaseSchedule(lengths)
    results = run_selfplay_runs(
        game, qset, schedule, config.epsilon, d, e, config.strict_visitation, base_seed, config.n_seeds, workers
    )
    objective = None
    if game.channel.variant == "global":
        objective = {
            tuple(p) for p in satisficing.objective_equilibrium_set(game, qset, config.epsilon)
        }
    rows, events = [], []
    for r in results:
        final = tuple(r["final"])
        in_subj = bool(eq_mask[table.index(final)])
        row = {
            "run": r["run"],
            "start": r["start"],
            "final": list(final),
            "in_subjective_eq": in_subj,
            "satisfied_last": r["satisfied_last"],
        }
        if objective is not None:
            row["in_objective_eq"] = final in objective
        rows.append(row)
        events.extend(r["events"])
    key = "in_objective_eq" if objective is not None else "in_subjective_eq"
    hits = sum(bool(r[key]) for r in rows)
    low, high = wilson_interval(hits, len(rows))
    agg = {
        "criterion": key,
        "frequency": hits / len(rows),
        "wilson_low": low,
        "wilson_high": high,
        "subjective_frequency": sum(r["in_subjective_eq"] for r in rows) / len(rows),
        "n_runs": len(rows),
        "phase_length": lengths[0],
        "n_phases": len(lengths),
    }
    extra = {"tolerance_report": report.to_dict(), "phase_length_search": search_info, "equilibria": int(eq_mask.sum())}
    return RunSummary("selfplay", rows, agg, out_dir, events), extra


def _mode_sweep(config, base_seed, out_dir, workers):
    keys = sorted(config.sweep)
    rows = []
    for values in itertools.product(*(config.sweep[k] for k in keys)):
        cell = dict(zip(keys, values))
        data = config.to_dict()
        data.update(cell)
        data.update(mode=config.sweep_mode, sweep=None)
        tag = hashlib.sha1(json.dumps(cell, sort_keys=True).encode()).hexdigest()[:10]
        sub = run_experiment(ExperimentConfig.from_dict(data), base_seed, out_dir / f"cell_{tag}", workers)
        rows.append({**{k: cell[k] for k in keys}, "cell": tag, **{k: v for k, v in sub.aggregate.items() if not isinstance(v, (list, dict))}})
    return RunSummary("sweep", rows, {"cells": len(rows)}, out_dir), {}


_HANDLERS = {
    "solve": _mode_solve,
    "naive-learn": _mode_naive,
    "oracle-dynamics": _mode_oracle,
    "paths": _mode_paths,
    "selfplay": _mode_selfplay,
    "sweep": _mode_sweep,
    "tolerance": _mode_tolerance,
}
