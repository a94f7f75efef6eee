"""Finite N-player mean-field games with deterministic observation channels.

Canonical orders used throughout the package:

* global states are indexed mixed-radix, little-endian by player:
  ``index(s) = sum_i s[i] * n_local_states**i``;
* empirical measures (count vectors) are listed in descending lexicographic
  order, so for two players on two local states the order is
  ``(2, 0), (1, 1), (0, 2)``;
* observation ordinals are ``index(s)`` (global), ``x * |Emp_N| + e``
  (mean-field), ``x * k + (c - 1)`` (compressed, classes ``c`` in ``1..k``)
  and ``x`` (local).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ConfigError, GuardrailError

MAX_GLOBAL_STATES = 10**6

GLOBAL = "global"
MEAN_FIELD = "mean_field"
COMPRESSED = "compressed"
LOCAL = "local"
CHANNEL_VARIANTS = (GLOBAL, MEAN_FIELD, COMPRESSED, LOCAL)

GlobalState = tuple  # length-N tuple of local-state indices


@dataclass(frozen=True)
class MeanFieldState:
    counts: tuple[int, ...]
    index: int

    @property
    def n_players(self) -> int:
        return sum(self.counts)

    @property
    def weights(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float) / self.n_players

    def fractions(self) -> tuple[Fraction, ...]:
        n = self.n_players
        return tuple(Fraction(c, n) for c in self.counts)


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def enumerate_empirical_measures(n_players: int, n_local_states: int) -> list[MeanFieldState]:
    """All count vectors of ``n_players`` over ``n_local_states`` in canonical order."""
    if n_players < 1 or n_local_states < 1:
        raise ConfigError("need at least one player and one local state")
    return [
        MeanFieldState(counts, idx)
        for idx, counts in enumerate(_compositions(n_players, n_local_states))
    ]


def n_empirical_measures(n_players: int, n_local_states: int) -> int:
    return math.comb(n_players + n_local_states - 1, n_local_states - 1)


@dataclass(frozen=True)
class ObservationChannel:
    """One of the four deterministic observation channels.

    ``f_table`` (compressed only) lists the class label in ``1..k`` of every
    empirical measure, in canonical ``Emp_N`` order.
    """

    variant: str
    k: int | None = None
    f_table: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.variant not in CHANNEL_VARIANTS:
            raise ConfigError(f"unknown channel variant {self.variant!r}")
        if self.variant == COMPRESSED:
            if self.k is None or self.k < 1:
                raise ConfigError("compressed channel needs k >= 1")
            if self.f_table is None:
                raise ConfigError("compressed channel needs an f_table")
            object.__setattr__(self, "f_table", tuple(int(c) for c in self.f_table))
            bad = [c for c in self.f_table if not 1 <= c <= self.k]
            if bad:
                raise ConfigError(f"f_table labels outside [1, {self.k}]: {bad}")

    @classmethod
    def global_state(cls) -> "ObservationChannel":
        return cls(GLOBAL)

    @classmethod
    def mean_field(cls) -> "ObservationChannel":
        return cls(MEAN_FIELD)

    @classmethod
    def local(cls) -> "ObservationChannel":
        return cls(LOCAL)

    @classmethod
    def compressed(cls, k: int, f_table: Sequence[int]) -> "ObservationChannel":
        return cls(COMPRESSED, k, tuple(f_table))

    @classmethod
    def uninformative(cls, n_measures: int) -> "ObservationChannel":
        """Compressed channel with a single class; equivalent to ``local``."""
        return cls(COMPRESSED, 1, (1,) * n_measures)

    def to_dict(self) -> dict:
        out: dict = {"variant": self.variant}
        if self.variant == COMPRESSED:
            out["k"] = self.k
            out["f_table"] = list(self.f_table)
        return out


@dataclass(frozen=True)
class Observation:
    kind: str
    value: object
    ordinal: int


@dataclass(frozen=True, eq=False)
class GameSpec:
    """A finite partially observed N-player mean-field game.

    ``cost[x, e, a]`` and ``transition[x, e, a, x']`` are indexed by local
    state, empirical-measure ordinal and action. ``initial_dist`` is a
    distribution over global-state indices, or an ``(N, |X_loc|)`` table of
    independent per-player initial laws.
    """

    n_players: int
    n_local_states: int
    n_actions: int
    discount: float
    cost: np.ndarray
    transition: np.ndarray
    initial_dist: np.ndarray
    channel: ObservationChannel = field(default_factory=ObservationChannel.global_state)
    name: str = ""

    def __post_init__(self):
        n, nx, nu = self.n_players, self.n_local_states, self.n_actions
        if n < 1 or nx < 1 or nu < 1:
            raise ConfigError("n_players, n_local_states and n_actions must be positive")
        if nx**n > MAX_GLOBAL_STATES:
            raise GuardrailError(
                f"|X_loc|^N = {nx}^{n} exceeds the {MAX_GLOBAL_STATES} global-state limit"
            )
        if not 0.0 < self.discount < 1.0:
            raise ConfigError("discount must lie in (0, 1)")
        ne = n_empirical_measures(n, nx)
        cost = np.array(self.cost, dtype=float)
        trans = np.array(self.transition, dtype=float)
        if cost.shape != (nx, ne, nu):
            raise ConfigError(f"cost table shape {cost.shape} != {(nx, ne, nu)}")
        if not np.all(np.isfinite(cost)):
            raise ConfigError("cost table must be finite")
        if trans.shape != (nx, ne, nu, nx):
            raise ConfigError(f"transition table shape {trans.shape} != {(nx, ne, nu, nx)}")
        if np.any(trans < 0) or np.max(np.abs(trans.sum(axis=-1) - 1.0)) > 1e-12:
            raise ConfigError("transition rows must be nonnegative and sum to 1")
        init = np.array(self.initial_dist, dtype=float)
        if init.shape == (n, nx):
            if np.any(init < 0) or np.max(np.abs(init.sum(axis=1) - 1.0)) > 1e-12:
                raise ConfigError("per-player initial laws must be distributions")
            locals_ = _global_locals(n, nx)
            init = np.prod(init[np.arange(n), locals_], axis=1)
        if init.shape != (nx**n,):
            raise ConfigError(f"initial_dist shape {init.shape} is neither {(nx**n,)} nor {(n, nx)}")
        if np.any(init < 0) or abs(init.sum() - 1.0) > 1e-12:
            raise ConfigError("initial_dist must be a probability vector")
        if self.channel.variant == COMPRESSED and len(self.channel.f_table) != ne:
            raise ConfigError(
                f"f_table has {len(self.channel.f_table)} labels but |Emp_N| = {ne}"
            )
        for arr in (cost, trans, init):
            arr.setflags(write=False)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "transition", trans)
        object.__setattr__(self, "initial_dist", init)

    # -- sizes ---------------------------------------------------------------
    @property
    def n_global_states(self) -> int:
        return self.n_local_states**self.n_players

    @cached_property
    def measures(self) -> list[MeanFieldState]:
        return enumerate_empirical_measures(self.n_players, self.n_local_states)

    @property
    def n_measures(self) -> int:
        return len(self.measures)

    @cached_property
    def _measure_lookup(self) -> dict:
        return {m.counts: m.index for m in self.measures}

    @property
    def n_observations(self) -> int:
        return observation_space_size(self, self.channel)

    @property
    def cost_bound(self) -> float:
        """Sup norm of the stage cost."""
        return float(np.max(np.abs(self.cost)))

    # -- derived tables ------------------------------------------------------
    @cached_property
    def locals_table(self) -> np.ndarray:
        """``(G, N)`` local states of every global state."""
        out = _global_locals(self.n_players, self.n_local_states)
        out.setflags(write=False)
        return out

    @cached_property
    def measure_of_state(self) -> np.ndarray:
        """``(G,)`` empirical-measure ordinal of every global state."""
        nx = self.n_local_states
        counts = np.stack(
            [(self.locals_table == x).sum(axis=1) for x in range(nx)], axis=1
        )
        lookup = self._measure_lookup
        out = np.array([lookup[tuple(int(c) for c in row)] for row in counts], dtype=np.int64)
        out.setflags(write=False)
        return out

    @cached_property
    def obs_table(self) -> np.ndarray:
        """``(N, G)`` observation ordinal of every player at every global state."""
        out = observation_table(self, self.channel)
        out.setflags(write=False)
        return out

    @cached_property
    def reachable_observations(self) -> np.ndarray:
        """``(N, |Y|)`` mask of the observations in the image of each player's map."""
        out = np.zeros((self.n_players, self.n_observations), dtype=bool)
        for i in range(self.n_players):
            out[i, self.obs_table[i]] = True
        out.setflags(write=False)
        return out

    @cached_property
    def transition_cdf(self) -> np.ndarray:
        out = np.cumsum(self.transition, axis=-1)
        out[..., -1] = 1.0
        out.setflags(write=False)
        return out

    # -- conversions ---------------------------------------------------------
    def global_index(self, s: Sequence[int]) -> int:
        nx = self.n_local_states
        return int(sum(int(x) * nx**i for i, x in enumerate(s)))

    def global_state(self, index: int) -> GlobalState:
        return tuple(int(x) for x in self.locals_table[index])

    def with_channel(self, channel: ObservationChannel) -> "GameSpec":
        return GameSpec(
            self.n_players,
            self.n_local_states,
            self.n_actions,
            self.discount,
            self.cost,
            self.transition,
            self.initial_dist,
            channel,
            self.name,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_players": self.n_players,
            "n_local_states": self.n_local_states,
            "n_actions": self.n_actions,
            "discount": self.discount,
            "channel": self.channel.to_dict(),
            "cost_table": self.cost.tolist(),
            "transition_table": self.transition.tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }


def _global_locals(n_players: int, n_local_states: int) -> np.ndarray:
    idx = np.arange(n_local_states**n_players)
    return np.stack(
        [(idx // n_local_states**i) % n_local_states for i in range(n_players)], axis=1
    ).astype(np.int64)


def empirical_measure(game: GameSpec, s: Sequence[int]) -> MeanFieldState:
    """Empirical measure of the global state ``s``."""
    counts = [0] * game.n_local_states
    for x in s:
        counts[int(x)] += 1
    return game.measures[game._measure_lookup[tuple(counts)]]


def swap_players(s: Sequence[int], i: int, j: int) -> GlobalState:
    out = list(s)
    out[i], out[j] = out[j], out[i]
    return tuple(out)


def observation_space_size(game: GameSpec, channel: ObservationChannel) -> int:
    nx = game.n_local_states
    if channel.variant == GLOBAL:
        return game.n_global_states
    if channel.variant == MEAN_FIELD:
        return nx * game.n_measures
    if channel.variant == COMPRESSED:
        return nx * channel.k
    return nx


def observation_table(game: GameSpec, channel: ObservationChannel) -> np.ndarray:
    """``(N, G)`` observation ordinals under ``channel``."""
    n, g = game.n_players, game.n_global_states
    loc = game.locals_table
    emp = game.measure_of_state
    if channel.variant == GLOBAL:
        return np.tile(np.arange(g, dtype=np.int64), (n, 1))
    if channel.variant == MEAN_FIELD:
        return (loc * game.n_measures + emp[:, None]).T.copy()
    if channel.variant == COMPRESSED:
        if len(channel.f_table) != game.n_measures:
            raise ConfigError("f_table length does not match |Emp_N|")
        cls = np.asarray(channel.f_table, dtype=np.int64)[emp] - 1
        return (loc * channel.k + cls[:, None]).T.copy()
    return loc.T.copy()


def observe(channel: ObservationChannel, player: int, s: Sequence[int], game: GameSpec) -> Observation:
    """Player ``player``'s observation of the global state ``s``."""
    if not 0 <= player < game.n_players:
        raise IndexError(f"player {player} out of range")
    s = tuple(int(x) for x in s)
    mu = empirical_measure(game, s)
    xi = s[player]
    if channel.variant == GLOBAL:
        return Observation(GLOBAL, s, game.global_index(s))
    if channel.variant == MEAN_FIELD:
        return Observation(MEAN_FIELD, (xi, mu), xi * game.n_measures + mu.index)
    if channel.variant == COMPRESSED:
        c = channel.f_table[mu.index]
        return Observation(COMPRESSED, (xi, c), xi * channel.k + c - 1)
    return Observation(LOCAL, xi, xi)


def sample_index(cdf: np.ndarray, u: float) -> int:
    """Inverse-CDF draw: the first index whose cumulative mass exceeds ``u``."""
    return int(np.searchsorted(cdf, u, side="right"))


def sample_initial_state(game: GameSpec, rng: np.random.Generator) -> GlobalState:
    cdf = np.cumsum(game.initial_dist)
    cdf[-1] = 1.0
    return game.global_state(sample_index(cdf, rng.random()))


def step(game: GameSpec, s: Sequence[int], a: Sequence[int], rng: np.random.Generator):
    """Advance one period.

    Consumes exactly ``N`` uniforms from ``rng`` (one per player, in player
    order) and returns the next global state and the vector of stage costs.
    """
    s = tuple(int(x) for x in s)
    if len(a) != game.n_players or any(not 0 <= int(u) < game.n_actions for u in a):
        raise ValueError(f"invalid joint action {tuple(a)}")
    e = empirical_measure(game, s).index
    draws = rng.random(game.n_players)
    costs = np.empty(game.n_players)
    nxt = []
    for i, (x, u) in enumerate(zip(s, a)):
        costs[i] = game.cost[x, e, int(u)]
        nxt.append(sample_index(game.transition_cdf[x, e, int(u)], draws[i]))
    return tuple(nxt), costs


def _kernel_stack(joint) -> np.ndarray:
    kernels = getattr(joint, "kernels", joint)
    return np.asarray(kernels, dtype=float)


def local_marginals(game: GameSpec, joint) -> np.ndarray:
    """``(N, G, |X_loc|)`` law of each player's next local state under ``joint``."""
    kernels = _kernel_stack(joint)
    n, g = game.n_players, game.n_global_states
    if kernels.shape[0] != n or kernels.shape[1] != game.n_observations:
        raise ConfigError(
            f"joint policy defined on {kernels.shape[1]} observations, channel has {game.n_observations}"
        )
    loc, emp = game.locals_table, game.measure_of_state
    out = np.empty((n, g, game.n_local_states))
    for i in range(n):
        act = kernels[i][game.obs_table[i]]  # (G, U)
        rows = game.transition[loc[:, i], emp]  # (G, U, X)
        out[i] = np.einsum("ga,gax->gx", act, rows)
    return out


def product_kernel(game: GameSpec, marginals: np.ndarray) -> np.ndarray:
    """Combine per-player next-local-state laws into a ``(G, G)`` matrix."""
    loc = game.locals_table
    out = np.ones((marginals.shape[1], game.n_global_states))
    for i in range(marginals.shape[0]):
        out *= marginals[i][:, loc[:, i]]
    return out


def exact_chain_kernel(game: GameSpec, joint) -> np.ndarray:
    """Transition matrix of the global state under a stationary joint policy."""
    return product_kernel(game, local_marginals(game, joint))
