"""Tabular independent learners.

Naive learning keeps every player's policy fixed and runs asynchronous
Q-learning and value estimation with step size ``1/n``. Independent learning
chops time into exploration phases; at the end of each phase every player
runs a satisficing test on its own tables, keeps its policy if satisfied and
otherwise redraws it, and all tables and counters are reset.

Random streams are derived from ``numpy.random.SeedSequence(seed,
spawn_key=(run, kind, player, phase))`` so that each player's action stream,
the environment stream and each player's revision stream are independent of
one another and of how many phases or players are simulated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .errors import ConfigError, HypothesisError
from .game import GameSpec, sample_index
from .policy import QuantizedPolicySet, is_soft

ENV, ACTIONS, REVISION, INIT = 0, 1, 2, 3
CHUNK = 1 << 16


def stream(seed: int, run: int, kind: int, player: int = 0, phase: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(run, kind, player, phase)))


@dataclass
class LearnerState:
    q_hat: np.ndarray
    j_hat: np.ndarray
    n_counts: np.ndarray
    m_counts: np.ndarray
    current_policy_ordinal: int | None = None

    @classmethod
    def zeros(cls, n_observations: int, n_actions: int, ordinal: int | None = None) -> "LearnerState":
        return cls(
            np.zeros((n_observations, n_actions)),
            np.zeros(n_observations),
            np.zeros((n_observations, n_actions), dtype=np.int64),
            np.zeros(n_observations, dtype=np.int64),
            ordinal,
        )

    def reset(self) -> None:
        self.q_hat[:] = 0.0
        self.j_hat[:] = 0.0
        self.n_counts[:] = 0
        self.m_counts[:] = 0

    def record_visit(self, y: int, u: int) -> None:
        self.n_counts[y, u] += 1
        self.m_counts[y] += 1

    def copy(self) -> "LearnerState":
        return LearnerState(
            self.q_hat.copy(), self.j_hat.copy(), self.n_counts.copy(), self.m_counts.copy(),
            self.current_policy_ordinal,
        )


def q_update(state: LearnerState, y: int, u: int, cost: float, y_next: int, beta: float) -> LearnerState:
    """One Q-learning step at ``(y, u)``; the visit must already be counted."""
    n = state.n_counts[y, u]
    if n < 1:
        raise ValueError("record the visit before updating")
    target = cost + beta * state.q_hat[y_next].min()
    state.q_hat[y, u] += (target - state.q_hat[y, u]) / n
    return state


def j_update(state: LearnerState, y: int, cost: float, y_next: int, beta: float) -> LearnerState:
    """One value-estimation step at ``y``; the visit must already be counted."""
    m = state.m_counts[y]
    if m < 1:
        raise ValueError("record the visit before updating")
    target = cost + beta * state.j_hat[y_next]
    state.j_hat[y] += (target - state.j_hat[y]) / m
    return state


def satisficing_test(
    state: LearnerState,
    epsilon: float,
    tolerance: float,
    strict: bool = False,
    reachable: np.ndarray | None = None,
) -> bool:
    """End-of-phase test ``J(y) <= min_a Q(y, a) + epsilon + tolerance``.

    Only visited observations are checked. In strict mode any unvisited
    observation in ``reachable`` (all observations if not given) fails the
    test outright.
    """
    visited = state.m_counts > 0
    if strict:
        needed = np.ones_like(visited) if reachable is None else np.asarray(reachable, dtype=bool)
        if np.any(needed & ~visited):
            return False
    slack = state.j_hat[visited] - state.q_hat[visited].min(axis=1)
    return bool(np.all(slack <= epsilon + tolerance))


# -- compiled simulation kernel ---------------------------------------------

@numba.njit(cache=True)
def _draw(cdf_row, u):
    k = 0
    last = cdf_row.shape[0] - 1
    while k < last and cdf_row[k] <= u:
        k += 1
    return k


@numba.njit(cache=True)
def _simulate(
    s, obs, locs, emp, radix, cost, trans_cdf, pol_cdf, beta,
    act_u, env_u, q, j, n, m, traj_cost,
):
    steps = act_u.shape[0]
    n_players = obs.shape[0]
    ys = np.empty(n_players, dtype=np.int64)
    us = np.empty(n_players, dtype=np.int64)
    cs = np.empty(n_players)
    for t in range(steps):
        e = emp[s]
        nxt = 0
        for i in range(n_players):
            y = obs[i, s]
            x = locs[s, i]
            u = _draw(pol_cdf[i, y], act_u[t, i])
            ys[i] = y
            us[i] = u
            cs[i] = cost[x, e, u]
            nxt += _draw(trans_cdf[x, e, u], env_u[t, i]) * radix[i]
        for i in range(n_players):
            y, u, c = ys[i], us[i], cs[i]
            y2 = obs[i, nxt]
            best = q[i, y2, 0]
            for a in range(1, q.shape[2]):
                if q[i, y2, a] < best:
                    best = q[i, y2, a]
            jnext = j[i, y2]
            n[i, y, u] += 1
            m[i, y] += 1
            q[i, y, u] += (c + beta * best - q[i, y, u]) / n[i, y, u]
            j[i, y] += (c + beta * jnext - j[i, y]) / m[i, y]
            traj_cost[i] += c
        s = nxt
    return s


def _policy_cdf(kernels: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(kernels, axis=-1)
    cdf[..., -1] = 1.0
    return np.ascontiguousarray(cdf)


class PhaseSimulator:
    """Runs blocks of play under a fixed joint policy, updating stacked learner tables."""

    def __init__(self, game: GameSpec):
        self.game = game
        self.obs = np.ascontiguousarray(game.obs_table, dtype=np.int64)
        self.locs = np.ascontiguousarray(game.locals_table, dtype=np.int64)
        self.emp = np.ascontiguousarray(game.measure_of_state, dtype=np.int64)
        self.radix = game.n_local_states ** np.arange(game.n_players, dtype=np.int64)
        self.cost = np.ascontiguousarray(game.cost)
        self.trans_cdf = np.ascontiguousarray(game.transition_cdf)
        n, ny, nu = game.n_players, game.n_observations, game.n_actions
        self.q = np.zeros((n, ny, nu))
        self.j = np.zeros((n, ny))
        self.n = np.zeros((n, ny, nu), dtype=np.int64)
        self.m = np.zeros((n, ny), dtype=np.int64)
        self.total_cost = np.zeros(n)

    def reset(self) -> None:
        for arr in (self.q, self.j, self.n, self.m):
            arr[:] = 0

    def run(self, s: int, kernels: np.ndarray, steps: int, act_rngs, env_rng) -> int:
        """Advance ``steps`` periods from global index ``s``; returns the final index."""
        pol_cdf = _policy_cdf(np.asarray(kernels, dtype=float))
        beta = self.game.discount
        done = 0
        while done < steps:
            chunk = min(CHUNK, steps - done)
            act_u = np.empty((chunk, self.game.n_players))
            for i, r in enumerate(act_rngs):
                act_u[:, i] = r.random(chunk)
            env_u = env_rng.random((chunk, self.game.n_players))
            s = _simulate(
                s, self.obs, self.locs, self.emp, self.radix, self.cost, self.trans_cdf,
                pol_cdf, beta, act_u, env_u, self.q, self.j, self.n, self.m, self.total_cost,
            )
            done += chunk
        return int(s)

    def state(self, player: int) -> LearnerState:
        return LearnerState(
            self.q[player].copy(), self.j[player].copy(), self.n[player].copy(), self.m[player].copy()
        )


def reference_run(game: GameSpec, kernels: np.ndarray, s: int, steps: int, act_rngs, env_rng, states):
    """Plain-Python counterpart of :class:`PhaseSimulator` built on ``game.step``.

    Uses the same random streams in the same order, so both produce the same
    trajectory and tables.
    """
    from .game import step

    kernels = np.asarray(kernels, dtype=float)
    cdf = _policy_cdf(kernels)
    beta = game.discount
    state = game.global_state(s)
    for _ in range(steps):
        idx = game.global_index(state)
        ys = [int(game.obs_table[i, idx]) for i in range(game.n_players)]
        acts = [sample_index(cdf[i, ys[i]], act_rngs[i].random()) for i in range(game.n_players)]
        state, costs = step(game, state, acts, env_rng)
        nxt = game.global_index(state)
        for i, st in enumerate(states):
            y2 = int(game.obs_table[i, nxt])
            st.record_visit(ys[i], acts[i])
            q_update(st, ys[i], acts[i], costs[i], y2, beta)
            j_update(st, ys[i], costs[i], y2, beta)
    return game.global_index(state)


# -- naive learning ----------------------------------------------------------

@dataclass
class NaiveLearningResult:
    q_bar: np.ndarray  # (N, |Y|, |U|)
    j_bar: np.ndarray  # (N, |Y|)
    n_counts: np.ndarray
    m_counts: np.ndarray
    snapshots: list[tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)
    final_state: int = 0


def run_naive_learning(
    game: GameSpec,
    joint,
    steps: int,
    seed: int,
    snapshot_every: int | None = None,
    run: int = 0,
) -> NaiveLearningResult:
    """Fixed-policy learning from the initial distribution for ``steps`` periods."""
    kernels = np.asarray(getattr(joint, "kernels", joint), dtype=float)
    if kernels.shape != (game.n_players, game.n_observations, game.n_actions):
        raise ConfigError("joint policy does not match the game's observation space")
    if not np.min(kernels) > 0:
        raise HypothesisError("naive learning requires a soft joint policy")
    from .exact import check_chain_structure
    from .game import exact_chain_kernel

    check_chain_structure(exact_chain_kernel(game, kernels))
    sim = PhaseSimulator(game)
    init = stream(seed, run, INIT)
    cdf0 = np.cumsum(game.initial_dist)
    s = sample_index(cdf0, init.random())
    acts = [stream(seed, run, ACTIONS, i) for i in range(game.n_players)]
    env = stream(seed, run, ENV)
    out = NaiveLearningResult(sim.q, sim.j, sim.n, sim.m)
    every = snapshot_every or steps
    done = 0
    while done < steps:
        block = min(every, steps - done)
        s = sim.run(s, kernels, block, acts, env)
        done += block
        if snapshot_every:
            out.snapshots.append((done, sim.q.copy(), sim.j.copy()))
    out.final_state = s
    return out


# -- independent learning ----------------------------------------------------

@dataclass(frozen=True)
class PhaseSchedule:
    lengths: tuple[int, ...]

    def __post_init__(self):
        if not self.lengths or any(int(t) < 1 for t in self.lengths):
            raise ConfigError("phase lengths must be positive")

    @classmethod
    def constant(cls, length: int, n_phases: int) -> "PhaseSchedule":
        return cls((int(length),) * int(n_phases))

    def __len__(self) -> int:
        return len(self.lengths)

    def starts(self) -> list[int]:
        return [0] + list(np.cumsum(self.lengths)[:-1].tolist())


RevisionKernel = Callable[[int, int, np.ndarray, np.ndarray, np.random.Generator], int]


@dataclass
class LearningRun:
    profiles: np.ndarray  # (K + 1, N) policy ordinals, row k is the profile used in phase k
    satisfied: np.ndarray  # (K, N)
    errors: list[dict] = field(default_factory=list)
    final_state: int = 0
    events: list[dict] = field(default_factory=list)

    @property
    def final_profile(self) -> tuple[int, ...]:
        return tuple(int(k) for k in self.profiles[-1])


def independent_learning_run(
    game: GameSpec,
    shared_set: QuantizedPolicySet,
    schedule: PhaseSchedule,
    epsilon: float,
    tolerances: Sequence[float],
    revision_probs: Sequence[float],
    initial_profile: Sequence[int],
    seed: int,
    revision_kernel: RevisionKernel | Sequence[RevisionKernel | None] | None = None,
    *,
    strict: bool = False,
    run: int = 0,
    oracle: Callable | None = None,
    event_sink: Callable[[dict], None] | None = None,
) -> LearningRun:
    """Phase-based independent learning with satisficing revisions.

    ``oracle(profile)`` may return per-player ``SubjectiveFunctions`` for
    error diagnostics; ``event_sink`` receives one dict per phase.
    """
    n = game.n_players
    size = len(shared_set)
    if shared_set.tag != f"{game.channel.variant}[{game.n_observations}]":
        raise ConfigError("quantized set was built for a different channel than the game's")
    if len(tolerances) != n or len(revision_probs) != n or len(initial_profile) != n:
        raise ConfigError("need one tolerance, revision probability and initial ordinal per player")
    if any(not 0 <= int(k) < size for k in initial_profile):
        raise ConfigError(f"initial ordinals must lie in [0, {size})")
    if not all(is_soft(shared_set.policy(k, i), np.finfo(float).tiny) for k in range(size) for i in range(n)):
        raise ConfigError("every member of the policy set must be soft")
    if revision_kernel is None or callable(revision_kernel):
        kernels_by_player = [revision_kernel] * n
    else:
        kernels_by_player = list(revision_kernel)

    sim = PhaseSimulator(game)
    s = sample_index(np.cumsum(game.initial_dist), stream(seed, run, INIT).random())
    profile = [int(k) for k in initial_profile]
    profiles = [tuple(profile)]
    sat_rows = []
    errors = []
    events = []
    reachable = game.reachable_observations
    for k, length in enumerate(schedule.lengths):
        sim.reset()
        acts = [stream(seed, run, ACTIONS, i, k) for i in range(n)]
        env = stream(seed, run, ENV, 0, k)
        s = sim.run(s, shared_set.joint_kernels(profile), length, acts, env)
        flags = []
        nxt = list(profile)
        for i in range(n):
            st = sim.state(i)
            ok = satisficing_test(st, epsilon, tolerances[i], strict, reachable[i])
            flags.append(ok)
            if ok:
                continue
            rng = stream(seed, run, REVISION, i, k)
            if rng.random() < revision_probs[i]:
                nxt[i] = int(rng.integers(size))
            elif kernels_by_player[i] is not None:
                nxt[i] = int(kernels_by_player[i](i, profile[i], st.j_hat, st.q_hat, rng))
                if not 0 <= nxt[i] < size:
                    raise ConfigError(f"revision kernel returned ordinal {nxt[i]} outside [0, {size})")
        event = {
            "run": run,
            "phase": k,
            "profile": list(profile),
            "satisfied": flags,
            "next_profile": nxt,
        }
        if oracle is not None:
            err = _table_errors(sim, oracle(tuple(profile)), reachable)
            errors.append(err)
            event.update(err)
        events.append(event)
        if event_sink is not None:
            event_sink(event)
        sat_rows.append(flags)
        profile = nxt
        profiles.append(tuple(profile))
    return LearningRun(
        np.array(profiles, dtype=np.int64),
        np.array(sat_rows, dtype=bool).reshape(len(schedule), n),
        errors,
        s,
        events,
    )


def _table_errors(sim: PhaseSimulator, funcs, reachable) -> dict:
    q_err, j_err = [], []
    for i, f in enumerate(funcs):
        r = reachable[i]
        q_err.append(float(np.max(np.abs(sim.q[i][r] - f.w[r]))))
        j_err.append(float(np.max(np.abs(sim.j[i][r] - f.v[r]))))
    return {"q_error": q_err, "j_error": j_err}


def write_events(path, events: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
