"""Policy-space dynamics over a shared quantized policy set.

Profiles are tuples of member ordinals, one per player. All satisfaction
flags come from the exact subjective functions tabulated by
:class:`~mfglab.exact.ProfileTable`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyEquilibriumError, HypothesisError
from .exact import BR_ATOL, ProfileTable, objective_gap, profile_from_index
from .game import GLOBAL, MEAN_FIELD, GameSpec
from .policy import KERNEL_TOL, QuantizedPolicySet, is_mean_field_type, others_symmetric

Profile = tuple[int, ...]


def _table(game, qset, table):
    return table if table is not None else ProfileTable(game, qset)


def symmetry_classes(qset: QuantizedPolicySet) -> np.ndarray:
    """Smallest ordinal of a member with the same kernel, for every member."""
    flat = qset.members.reshape(len(qset), -1)
    out = np.arange(len(qset))
    for k in range(len(qset)):
        same = np.flatnonzero(np.max(np.abs(flat[:k] - flat[k]), axis=1) <= KERNEL_TOL) if k else []
        if len(same):
            out[k] = out[same[0]]
    return out


def subjective_equilibrium_set(
    game: GameSpec, shared_set: QuantizedPolicySet, epsilon: float, table: ProfileTable | None = None
) -> list[Profile]:
    """Every profile in which each player passes the subjective best-response test."""
    table = _table(game, shared_set, table)
    mask = table.equilibrium_mask(epsilon)
    n = game.n_players
    return [profile_from_index(int(p), len(shared_set), n) for p in np.flatnonzero(mask)]


def objective_gaps(game: GameSpec, shared_set: QuantizedPolicySet) -> np.ndarray:
    """``(P, N)`` objective best-response gaps; NaN where no induced MDP exists."""
    variant = game.channel.variant
    if variant not in (GLOBAL, MEAN_FIELD):
        raise HypothesisError(f"objective best responses are not computable on the {variant} channel")
    n, size = game.n_players, len(shared_set)
    out = np.full((size**n, n), np.nan)
    for p in range(size**n):
        joint = shared_set.joint(profile_from_index(p, size, n))
        for i in range(n):
            if variant == MEAN_FIELD and not others_symmetric(game, joint, i):
                continue
            out[p, i] = objective_gap(game, i, joint)
    return out


def objective_equilibrium_set(
    game: GameSpec, shared_set: QuantizedPolicySet, epsilon: float, gaps: np.ndarray | None = None
) -> list[Profile]:
    """Profiles in which every player's objective gap is at most ``epsilon``.

    On the mean-field channel only profiles whose co-players are symmetric
    for every player are eligible.
    """
    gaps = objective_gaps(game, shared_set) if gaps is None else gaps
    ok = np.all(np.nan_to_num(gaps, nan=np.inf) <= epsilon + BR_ATOL, axis=1)
    return [profile_from_index(int(p), len(shared_set), game.n_players) for p in np.flatnonzero(ok)]


def oracle_revision_step(
    game: GameSpec,
    shared_set: QuantizedPolicySet,
    profile: Sequence[int],
    epsilon: float,
    revision_probs: Sequence[float],
    rng: np.random.Generator,
    table: ProfileTable | None = None,
) -> Profile:
    """Satisfied players keep their policy; the others redraw it uniformly with probability ``e_i``."""
    table = _table(game, shared_set, table)
    flags = table.satisfied(profile, epsilon)
    out = list(int(k) for k in profile)
    for i, ok in enumerate(flags):
        if ok:
            continue
        if rng.random() < revision_probs[i]:
            out[i] = int(rng.integers(len(shared_set)))
    return tuple(out)


@dataclass
class OracleRun:
    trajectory: np.ndarray  # (steps + 1, N)
    hitting_time: int | None
    left_after_hit: bool


def run_oracle_dynamics(
    game: GameSpec,
    shared_set: QuantizedPolicySet,
    epsilon: float,
    revision_probs: Sequence[float],
    start: Sequence[int],
    max_steps: int,
    seed: int,
    table: ProfileTable | None = None,
) -> OracleRun:
    """Iterate oracle revisions for ``max_steps`` steps, recording the first equilibrium hit."""
    table = _table(game, shared_set, table)
    eq = table.equilibrium_mask(epsilon)
    if not eq.any():
        raise EmptyEquilibriumError(f"no subjective {epsilon}-equilibrium in the policy set")
    rng = np.random.default_rng(seed)
    prof = tuple(int(k) for k in start)
    traj = [prof]
    hit = 0 if eq[table.index(prof)] else None
    left = False
    for t in range(1, max_steps + 1):
        prof = oracle_revision_step(game, shared_set, prof, epsilon, revision_probs, rng, table)
        traj.append(prof)
        inside = eq[table.index(prof)]
        if hit is None and inside:
            hit = t
        elif hit is not None and not inside:
            left = True
    return OracleRun(np.array(traj, dtype=np.int64), hit, left)


@dataclass
class BatchOracleStats:
    hitting_times: np.ndarray  # (R,) with -1 for no hit
    left_after_hit: np.ndarray  # (R,) bool

    @property
    def hit_fraction(self) -> float:
        return float(np.mean(self.hitting_times >= 0))


def run_oracle_dynamics_batch(
    table: ProfileTable,
    epsilon: float,
    revision_probs: Sequence[float],
    starts: np.ndarray,
    max_steps: int,
    seed: int,
) -> BatchOracleStats:
    """Many independent oracle-dynamics runs advanced together (vectorised over runs)."""
    size, n = len(table.qset), table.game.n_players
    eq = table.equilibrium_mask(epsilon)
    if not eq.any():
        raise EmptyEquilibriumError(f"no subjective {epsilon}-equilibrium in the policy set")
    sat = table.gap <= epsilon + BR_ATOL
    e = np.asarray(revision_probs, dtype=float)
    rng = np.random.default_rng(seed)
    prof = np.array(starts, dtype=np.int64).reshape(-1, n)
    radix = size ** np.arange(n - 1, -1, -1)
    idx = prof @ radix
    hit = np.where(eq[idx], 0, -1)
    left = np.zeros(len(prof), dtype=bool)
    for t in range(1, max_steps + 1):
        flags = sat[idx]
        move = (~flags) & (rng.random(prof.shape) < e)
        draws = rng.integers(size, size=prof.shape)
        prof = np.where(move, draws, prof)
        idx = prof @ radix
        inside = eq[idx]
        left |= (hit >= 0) & ~inside
        hit = np.where((hit < 0) & inside, t, hit)
    return BatchOracleStats(hit, left)


# -- satisficing paths -------------------------------------------------------

@dataclass
class SatisficingPath:
    profiles: list[Profile]
    changed: list[list[int]] = field(default_factory=list)
    satisfied: list[list[bool]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.profiles)

    def to_dict(self) -> dict:
        return {
            "profiles": [list(p) for p in self.profiles],
            "changed": self.changed,
            "satisfied": self.satisfied,
        }


@dataclass
class PathCheck:
    ok: bool
    step: int | None = None
    player: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def _check_members_mean_field(game: GameSpec, shared_set: QuantizedPolicySet) -> None:
    if game.channel.variant != GLOBAL:
        return
    for k in range(len(shared_set)):
        for i in range(game.n_players):
            if not is_mean_field_type(shared_set.policy(k, i), i, game):
                raise HypothesisError(f"member {k} is not of mean-field type on the global channel")


def construct_satisficing_path(
    game: GameSpec,
    shared_set: QuantizedPolicySet,
    epsilon: float,
    start: Sequence[int],
    table: ProfileTable | None = None,
) -> SatisficingPath:
    """Cohort-growing satisficing path from ``start`` into the equilibrium set.

    The cohort starts as the players whose policy is symmetric to player 0's.
    While the profile is not an equilibrium: if the cohort is everyone, all
    players jump to the lowest-ordinal equilibrium; if the cohort is
    unsatisfied it adopts the policy of the lowest-index outsider (and the
    cohort becomes everyone now holding that policy); otherwise the
    lowest-index unsatisfied outsider adopts the cohort's policy.
    """
    table = _table(game, shared_set, table)
    _check_members_mean_field(game, shared_set)
    eq = subjective_equilibrium_set(game, shared_set, epsilon, table)
    if not eq:
        raise EmptyEquilibriumError(f"no subjective {epsilon}-equilibrium in the policy set")
    cls = symmetry_classes(shared_set)
    n = game.n_players
    prof = [int(k) for k in start]
    if len(prof) != n or any(not 0 <= k < len(shared_set) for k in prof):
        raise ConfigError(f"invalid start profile {tuple(start)}")
    path = SatisficingPath([tuple(prof)])
    cohort = {j for j in range(n) if cls[prof[j]] == cls[prof[0]]}

    while True:
        flags = [bool(f) for f in table.satisfied(prof, epsilon)]
        if all(flags):
            break
        if len(path.profiles) > n + 1:
            raise RuntimeError("cohort construction exceeded N + 1 profiles")
        cohort_flags = {flags[j] for j in cohort}
        if len(cohort_flags) != 1:
            raise HypothesisError(
                f"symmetric players {sorted(cohort)} disagree on satisfaction at profile {tuple(prof)}"
            )
        nxt = list(prof)
        if len(cohort) == n:
            nxt = list(eq[0])
            new_cohort = set(range(n))
        elif not flags[min(cohort)]:
            p = min(set(range(n)) - cohort)
            for j in cohort:
                nxt[j] = prof[p]
            new_cohort = {j for j in range(n) if cls[nxt[j]] == cls[prof[p]]}
        else:
            p = min(j for j in range(n) if j not in cohort and not flags[j])
            nxt[p] = prof[min(cohort)]
            new_cohort = cohort | {p}
        changed = [j for j in range(n) if nxt[j] != prof[j]]
        if any(flags[j] for j in changed):
            raise RuntimeError("construction moved a satisfied player")
        if len(cohort) < n:
            if len({cls[nxt[j]] for j in new_cohort}) != 1 or len(new_cohort) <= len(cohort):
                raise RuntimeError("cohort invariant broken")
        path.changed.append(changed)
        path.satisfied.append(flags)
        prof = nxt
        cohort = new_cohort
        path.profiles.append(tuple(prof))
    path.satisfied.append([True] * n)
    return path


def verify_satisficing_path(
    game: GameSpec,
    shared_set: QuantizedPolicySet,
    epsilon: float,
    path: SatisficingPath | Sequence[Sequence[int]],
    require_terminal: bool = False,
    table: ProfileTable | None = None,
) -> PathCheck:
    """Check that no player satisfied at step ``k`` changes policy at step ``k + 1``."""
    profiles = path.profiles if isinstance(path, SatisficingPath) else [tuple(p) for p in path]
    if not profiles:
        raise ConfigError("path must contain at least one profile")
    table = _table(game, shared_set, table)
    for k in range(len(profiles) - 1):
        flags = table.satisfied(profiles[k], epsilon)
        for i, ok in enumerate(flags):
            if ok and profiles[k + 1][i] != profiles[k][i]:
                return PathCheck(False, k, i, f"player {i} was satisfied at step {k} but changed policy")
    if require_terminal and not bool(np.all(table.satisfied(profiles[-1], epsilon))):
        return PathCheck(False, len(profiles) - 1, None, "path does not end in the equilibrium set")
    return PathCheck(True)


def longest_constructed_path(
    game: GameSpec, shared_set: QuantizedPolicySet, epsilon: float, table: ProfileTable | None = None
) -> int:
    """Largest number of revision steps used by the cohort construction over all starts."""
    table = _table(game, shared_set, table)
    return max(
        len(construct_satisficing_path(game, shared_set, epsilon, prof, table)) - 1
        for prof in table.profiles()
    )


def flag_symmetry_violations(
    table: ProfileTable, epsilon: float, classes: np.ndarray | None = None
) -> list[tuple[Profile, int, int]]:
    """Profiles where two players with symmetric policies get different satisfaction flags."""
    classes = symmetry_classes(table.qset) if classes is None else classes
    sat = table.gap <= epsilon + BR_ATOL
    out = []
    n = table.game.n_players
    for p, prof in enumerate(table.profiles()):
        for i in range(n):
            for j in range(i + 1, n):
                if classes[prof[i]] == classes[prof[j]] and sat[p, i] != sat[p, j]:
                    out.append((prof, i, j))
    return out


# -- export ------------------------------------------------------------------

def write_equilibria_csv(path, profiles: Sequence[Profile]) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        n = len(profiles[0]) if profiles else 0
        wr.writerow(["schema"] + [f"player{i}" for i in range(n)])
        for p in profiles:
            wr.writerow(["v1", *p])


def write_paths_json(path, paths: dict[Profile, SatisficingPath]) -> None:
    data = [{"start": list(k), **v.to_dict()} for k, v in paths.items()]
    Path(path).write_text(json.dumps(data, indent=1))
