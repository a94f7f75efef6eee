"""Stationary policies, joint policies and quantized policy sets."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ConfigError, GuardrailError, HypothesisError
from .game import (
    COMPRESSED,
    GLOBAL,
    MEAN_FIELD,
    GameSpec,
    ObservationChannel,
    _compositions,
    observation_space_size,
)

KERNEL_TOL = 1e-12
MAX_SET_SIZE = 10**5

OBSERVATION_SPACE = "observation"
MEAN_FIELD_SPACE = "mean_field"
LOCAL_SPACE = "local"


def channel_tag(game: GameSpec, channel: ObservationChannel | None = None) -> str:
    channel = channel or game.channel
    return f"{channel.variant}[{observation_space_size(game, channel)}]"


@dataclass(frozen=True, eq=False)
class StationaryPolicy:
    """Row-stochastic table ``kernel[y, a]`` over a finite observation space."""

    kernel: np.ndarray
    channel_tag: str = ""

    def __post_init__(self):
        k = np.array(self.kernel, dtype=float)
        if k.ndim != 2 or k.shape[0] < 1 or k.shape[1] < 1:
            raise ConfigError(f"policy table must be 2-d and nonempty, got shape {k.shape}")
        if np.any(k < 0) or np.max(np.abs(k.sum(axis=1) - 1.0)) > KERNEL_TOL:
            raise ConfigError("policy rows must be nonnegative and sum to 1")
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)

    @property
    def n_observations(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]

    @classmethod
    def uniform(cls, n_observations: int, n_actions: int, tag: str = "") -> "StationaryPolicy":
        return cls(np.full((n_observations, n_actions), 1.0 / n_actions), tag)

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int, tag: str = "") -> "StationaryPolicy":
        table = np.zeros((len(actions), n_actions))
        table[np.arange(len(actions)), actions] = 1.0
        return cls(table, tag)

    def to_dict(self) -> dict:
        return {"channel_tag": self.channel_tag, "rows": self.kernel.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "StationaryPolicy":
        return cls(np.asarray(data["rows"], dtype=float), data.get("channel_tag", ""))


class JointPolicy:
    """One stationary policy per player, all on the same observation space."""

    def __init__(self, policies: Sequence[StationaryPolicy]):
        policies = tuple(policies)
        if not policies:
            raise ConfigError("joint policy needs at least one player")
        shapes = {p.kernel.shape for p in policies}
        tags = {p.channel_tag for p in policies}
        if len(shapes) != 1 or len(tags) != 1:
            raise ConfigError("all players' policies must share one observation space")
        self.policies = policies

    def __len__(self) -> int:
        return len(self.policies)

    def __getitem__(self, i: int) -> StationaryPolicy:
        return self.policies[i]

    def __iter__(self):
        return iter(self.policies)

    @cached_property
    def kernels(self) -> np.ndarray:
        out = np.stack([p.kernel for p in self.policies])
        out.setflags(write=False)
        return out

    @property
    def channel_tag(self) -> str:
        return self.policies[0].channel_tag

    def replace(self, player: int, policy: StationaryPolicy) -> "JointPolicy":
        ps = list(self.policies)
        ps[player] = policy
        return JointPolicy(ps)

    def to_dict(self) -> dict:
        return {"policies": [p.to_dict() for p in self.policies]}

    @classmethod
    def from_dict(cls, data: dict) -> "JointPolicy":
        return cls([StationaryPolicy.from_dict(p) for p in data["policies"]])


def policy_distance(p: StationaryPolicy, q: StationaryPolicy) -> float:
    """Largest absolute difference of action probabilities over all observations."""
    if p.kernel.shape != q.kernel.shape or p.channel_tag != q.channel_tag:
        raise ConfigError("policies live on different observation spaces")
    return float(np.max(np.abs(p.kernel - q.kernel)))


def joint_distance(p: JointPolicy, q: JointPolicy) -> float:
    if len(p) != len(q):
        raise ConfigError("joint policies have different numbers of players")
    return max(policy_distance(a, b) for a, b in zip(p, q))


def is_soft(p: StationaryPolicy | JointPolicy, xi: float) -> bool:
    if isinstance(p, JointPolicy):
        return all(is_soft(q, xi) for q in p)
    return bool(np.min(p.kernel) >= xi)


def is_soft_joint(joint: JointPolicy) -> bool:
    """Whether every player puts positive mass on every action everywhere."""
    return bool(np.min(joint.kernels) > 0.0)


# -- mean-field type policies on the global channel -------------------------

def _mf_ordinals(game: GameSpec, player: int) -> np.ndarray:
    """``(G,)`` index ``s^i * |Emp| + emp(s)`` of every global state."""
    return game.locals_table[:, player] * game.n_measures + game.measure_of_state


def reachable_mean_field_rows(game: GameSpec) -> np.ndarray:
    """Mask over ``X_loc x Emp_N`` of pairs ``(x, mu)`` with ``mu`` putting mass on ``x``."""
    mask = np.zeros(game.n_local_states * game.n_measures, dtype=bool)
    for m in game.measures:
        for x, c in enumerate(m.counts):
            if c > 0:
                mask[x * game.n_measures + m.index] = True
    return mask


def lift_mean_field_policy(kernel, player: int, game: GameSpec) -> StationaryPolicy:
    """Global-channel policy of ``player`` acting on ``(s^i, mu(s))`` through ``kernel``."""
    k = np.asarray(getattr(kernel, "kernel", kernel), dtype=float)
    expected = (game.n_local_states * game.n_measures, game.n_actions)
    if k.shape != expected:
        raise ConfigError(f"mean-field kernel shape {k.shape} != {expected}")
    table = k[_mf_ordinals(game, player)]
    return StationaryPolicy(table, channel_tag(game, ObservationChannel.global_state()))


def project_mean_field_policy(policy: StationaryPolicy, player: int, game: GameSpec) -> np.ndarray:
    """Recover the ``(x, mu)`` kernel behind a mean-field type global policy.

    Rows for pairs that no global state realises are filled with the uniform
    distribution. Raises :class:`HypothesisError` when the policy reacts to
    more of the global state than ``(s^i, mu(s))``.
    """
    if policy.n_observations != game.n_global_states:
        raise ConfigError("not a global-channel policy for this game")
    z = _mf_ordinals(game, player)
    out = np.full((game.n_local_states * game.n_measures, game.n_actions), 1.0 / game.n_actions)
    seen = np.zeros(out.shape[0], dtype=bool)
    for s, row in enumerate(z):
        if not seen[row]:
            out[row] = policy.kernel[s]
            seen[row] = True
        elif np.max(np.abs(out[row] - policy.kernel[s])) > KERNEL_TOL:
            raise HypothesisError(
                f"policy of player {player} is not of mean-field type (differs at global state {s})"
            )
    return out


def is_mean_field_type(policy: StationaryPolicy, player: int, game: GameSpec) -> bool:
    try:
        project_mean_field_policy(policy, player, game)
    except HypothesisError:
        return False
    return True


def is_mean_field_symmetric(
    p: StationaryPolicy,
    q: StationaryPolicy,
    game: GameSpec | None = None,
    players: tuple[int, int] | None = None,
) -> bool:
    """Whether two players' policies are driven by the same kernel.

    On mean-field, compressed and local channels the kernels are compared
    directly. On the global channel both policies are first projected to
    ``(x, mu)`` kernels, for which ``game`` and the two owning ``players``
    are required; a policy that is not of mean-field type raises
    :class:`HypothesisError`.
    """
    if p.kernel.shape != q.kernel.shape or p.channel_tag != q.channel_tag:
        raise ConfigError("policies live on different observation spaces")
    if p.channel_tag.startswith(GLOBAL + "["):
        if game is None or players is None:
            raise ConfigError("global-channel symmetry needs the game and both player indices")
        kp = project_mean_field_policy(p, players[0], game)
        kq = project_mean_field_policy(q, players[1], game)
        mask = reachable_mean_field_rows(game)
        return bool(np.max(np.abs(kp[mask] - kq[mask])) <= KERNEL_TOL)
    return bool(np.max(np.abs(p.kernel - q.kernel)) <= KERNEL_TOL)


def others_symmetric(game: GameSpec, joint: JointPolicy, player: int) -> bool:
    """Whether all players other than ``player`` hold pairwise symmetric policies."""
    others = [j for j in range(game.n_players) if j != player]
    return all(
        is_mean_field_symmetric(joint[others[0]], joint[j], game, (others[0], j))
        for j in others[1:]
    )


# -- quantization ------------------------------------------------------------

def simplex_grid(resolution: int, n_actions: int) -> np.ndarray:
    """All points of the form ``counts / resolution`` on the action simplex."""
    return np.array(list(_compositions(resolution, n_actions)), dtype=float) / resolution


def kernel_space_size(game: GameSpec, channel: ObservationChannel, kernel_space: str) -> int:
    if kernel_space == OBSERVATION_SPACE:
        return observation_space_size(game, channel)
    if kernel_space == MEAN_FIELD_SPACE:
        return game.n_local_states * game.n_measures
    if kernel_space == LOCAL_SPACE:
        return game.n_local_states
    raise ConfigError(f"unknown kernel space {kernel_space!r}")


def kernel_space_map(game: GameSpec, channel: ObservationChannel, kernel_space: str) -> np.ndarray:
    """``(N, |Y|)`` row of the kernel-space table used by each player at each observation."""
    n, ny = game.n_players, observation_space_size(game, channel)
    if kernel_space == OBSERVATION_SPACE:
        return np.tile(np.arange(ny), (n, 1))
    if kernel_space == MEAN_FIELD_SPACE:
        if channel.variant == GLOBAL:
            return np.stack([_mf_ordinals(game, i) for i in range(n)])
        if channel.variant == MEAN_FIELD:
            return np.tile(np.arange(ny), (n, 1))
        raise ConfigError(f"mean-field kernels cannot be read off the {channel.variant} channel")
    if kernel_space == LOCAL_SPACE:
        if channel.variant == GLOBAL:
            return game.locals_table.T.copy()
        if channel.variant == MEAN_FIELD:
            return np.tile(np.arange(ny) // game.n_measures, (n, 1))
        if channel.variant == COMPRESSED:
            return np.tile(np.arange(ny) // channel.k, (n, 1))
        return np.tile(np.arange(ny), (n, 1))
    raise ConfigError(f"unknown kernel space {kernel_space!r}")


@dataclass(frozen=True, eq=False)
class QuantizedPolicySet:
    """A finite soft policy set shared by every player.

    ``members[k]`` is a table over the kernel space (the channel's own
    observations, ``X_loc x Emp_N`` or ``X_loc``). ``lifted[k, i]`` is the
    same member rewritten as player ``i``'s table over the channel's
    observations; outside the global channel all players get the same table.
    """

    members: np.ndarray
    lifted: np.ndarray
    resolution: int
    softness_floor: float
    kernel_space: str
    channel: ObservationChannel
    tag: str

    def __len__(self) -> int:
        return self.members.shape[0]

    @property
    def size(self) -> int:
        return len(self)

    @property
    def covering_radius(self) -> float:
        n_actions = self.members.shape[2]
        return 1.0 / self.resolution + self.softness_floor * n_actions

    def policy(self, ordinal: int, player: int = 0) -> StationaryPolicy:
        if not 0 <= ordinal < len(self):
            raise IndexError(f"policy ordinal {ordinal} out of range [0, {len(self)})")
        return StationaryPolicy(self.lifted[ordinal, player], self.tag)

    @property
    def policies(self) -> list[StationaryPolicy]:
        return [self.policy(k) for k in range(len(self))]

    def joint(self, profile: Sequence[int]) -> JointPolicy:
        return JointPolicy([self.policy(int(k), i) for i, k in enumerate(profile)])

    def joint_kernels(self, profile: Sequence[int]) -> np.ndarray:
        return self.lifted[np.asarray(profile), np.arange(len(profile))]

    def nearest_member(self, policy: StationaryPolicy, player: int = 0) -> tuple[int, float]:
        if policy.kernel.shape != self.lifted.shape[2:]:
            raise ConfigError("policy does not live on this set's observation space")
        dists = np.max(np.abs(self.lifted[:, player] - policy.kernel[None]), axis=(1, 2))
        k = int(np.argmin(dists))
        return k, float(dists[k])

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "softness_floor": self.softness_floor,
            "kernel_space": self.kernel_space,
            "channel": self.channel.to_dict(),
            "members": [m.tolist() for m in self.members],
        }


def build_quantization(
    game: GameSpec,
    channel: ObservationChannel | None = None,
    resolution: int = 2,
    softness_floor: float = 0.05,
    *,
    kernel_space: str = OBSERVATION_SPACE,
    restrict_to: Sequence[int] | None = None,
    max_size: int = MAX_SET_SIZE,
) -> QuantizedPolicySet:
    """Grid-then-soften quantization of the stationary policies.

    Every gridded row is a point ``j / resolution`` of the action simplex
    mixed with the uniform distribution at weight ``softness_floor * |U|``;
    members are all combinations of gridded rows (``itertools.product``
    order, last row fastest). Rows outside ``restrict_to`` are uniform. For
    the mean-field kernel space, rows for ``(x, mu)`` pairs that cannot occur
    are kept uniform so that behaviourally identical members are not
    duplicated.
    """
    channel = channel or game.channel
    nu = game.n_actions
    if resolution < 1:
        raise ConfigError("resolution must be at least 1")
    if not 0.0 <= softness_floor < 1.0 / nu:
        raise ConfigError(f"softness floor must lie in [0, 1/|U|) = [0, {1.0 / nu})")
    nz = kernel_space_size(game, channel, kernel_space)
    zmap = kernel_space_map(game, channel, kernel_space)

    if restrict_to is None:
        rows = list(range(nz))
        if kernel_space == MEAN_FIELD_SPACE:
            rows = list(np.flatnonzero(reachable_mean_field_rows(game)))
    else:
        rows = sorted({int(r) for r in restrict_to})
        if any(not 0 <= r < nz for r in rows):
            raise ConfigError(f"restricted rows must lie in [0, {nz})")

    weight = softness_floor * nu
    grid = (1.0 - weight) * simplex_grid(resolution, nu) + weight / nu
    n_members = len(grid) ** len(rows)
    if n_members > max_size:
        raise GuardrailError(f"quantized set would have {n_members} members (limit {max_size})")

    base = np.full((nz, nu), 1.0 / nu)
    members = np.empty((n_members, nz, nu))
    for k, choice in enumerate(itertools.product(range(len(grid)), repeat=len(rows))):
        table = base.copy()
        table[rows] = grid[list(choice)]
        members[k] = table
    lifted = members[:, zmap]  # (M, N, |Y|, |U|)
    members.setflags(write=False)
    lifted.setflags(write=False)
    return QuantizedPolicySet(
        members, lifted, resolution, softness_floor, kernel_space, channel, channel_tag(game, channel)
    )


def set_from_dict(game: GameSpec, data: dict) -> QuantizedPolicySet:
    channel = ObservationChannel(**data["channel"]) if "channel" in data else game.channel
    kernel_space = data.get("kernel_space", OBSERVATION_SPACE)
    members = np.asarray(data["members"], dtype=float)
    lifted = members[:, kernel_space_map(game, channel, kernel_space)]
    members.setflags(write=False)
    lifted.setflags(write=False)
    return QuantizedPolicySet(
        members,
        lifted,
        int(data["resolution"]),
        float(data["softness_floor"]),
        kernel_space,
        channel,
        channel_tag(game, channel),
    )
