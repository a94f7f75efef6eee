"""Exact (simulation-free) solvers for finite games and MDPs.

Everything here is a deterministic function of its inputs: induced and
belief MDPs are built by exact marginalisation, values by linear solves or
value iteration, invariant measures by power iteration.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .errors import ChainStructureError, ConfigError, GuardrailError, HypothesisError
from .game import GLOBAL, MEAN_FIELD, GameSpec, exact_chain_kernel, local_marginals, product_kernel
from .policy import JointPolicy, QuantizedPolicySet, StationaryPolicy, channel_tag, others_symmetric

ZERO_GAP = 1e-12
BR_ATOL = 1e-12
MAX_HISTORY_NODES = 2 * 10**6
MAX_PROFILES = 10**6


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """Fully observed MDP with ``transition[s, a, s']`` and ``cost[s, a]``.

    ``labels`` records which ordinal of a larger space each state stands for
    (for MDPs built on the reachable part of an observation space).
    """

    transition: np.ndarray
    cost: np.ndarray
    discount: float
    labels: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        c = np.asarray(self.cost, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or c.shape != p.shape[:2]:
            raise ConfigError(f"inconsistent MDP shapes {p.shape} and {c.shape}")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=2) - 1.0)) > 1e-10:
            raise ConfigError("MDP transition rows must be stochastic")
        if not 0.0 < self.discount < 1.0:
            raise ConfigError("discount must lie in (0, 1)")
        labels = np.arange(p.shape[0]) if self.labels is None else np.asarray(self.labels)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "cost", c)
        object.__setattr__(self, "labels", labels)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True, eq=False)
class SubjectiveFunctions:
    v: np.ndarray
    w: np.ndarray
    soft_flag: bool
    reachable: np.ndarray

    def gaps(self) -> np.ndarray:
        """``v(y) - min_a w(y, a)`` on reachable observations."""
        return self.v[self.reachable] - self.w[self.reachable].min(axis=1)


@dataclass
class ToleranceReport:
    d_bar: float | None
    gap_set: np.ndarray
    xi_accuracy: float | None
    p_min: float
    path_bound: int
    epsilon: float
    player_tolerances: tuple[float, ...]
    revision_probs: tuple[float, ...]
    flagged_players: list[int] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return self.d_bar is not None and not self.flagged_players

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "d_bar": self.d_bar,
            "xi_accuracy": self.xi_accuracy,
            "p_min": self.p_min,
            "path_bound": self.path_bound,
            "player_tolerances": list(self.player_tolerances),
            "revision_probs": list(self.revision_probs),
            "flagged_players": list(self.flagged_players),
            "gap_set_size": int(self.gap_set.size),
        }


# -- Markov chains -----------------------------------------------------------

def check_chain_structure(kernel: np.ndarray) -> None:
    """Raise :class:`ChainStructureError` unless the chain is irreducible and aperiodic."""
    adj = csr_matrix(np.asarray(kernel) > 0)
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    if n_comp != 1:
        raise ChainStructureError(
            f"closed-loop chain is reducible ({n_comp} communicating classes); "
            "the ergodicity assumption on soft joint policies fails"
        )
    level = shortest_path(adj, indices=0, unweighted=True)
    rows, cols = adj.nonzero()
    period = int(np.gcd.reduce(np.abs(level[rows] + 1 - level[cols]).astype(np.int64)))
    if period != 1:
        raise ChainStructureError(
            f"closed-loop chain is periodic (period {period}); "
            "the ergodicity assumption on soft joint policies fails"
        )


def invariant_measure(kernel: np.ndarray, tol: float = 1e-12, max_iter: int = 10**6) -> np.ndarray:
    """Stationary distribution by power iteration.

    Stops at the first iterate with ``||nu K - nu||_1 < tol`` and returns
    ``nu K`` renormalised.
    """
    k = np.asarray(kernel, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ConfigError("kernel must be a square matrix")
    check_chain_structure(k)
    nu = np.full(k.shape[0], 1.0 / k.shape[0])
    for _ in range(max_iter):
        nxt = nu @ k
        nxt /= nxt.sum()
        if np.abs(nxt - nu).sum() < tol:
            return nxt
        nu = nxt
    raise ChainStructureError(f"power iteration did not reach tolerance {tol} in {max_iter} steps")


# -- per-player transition structure ----------------------------------------

def player_transitions(game: GameSpec, joint, player: int, marginals=None) -> np.ndarray:
    """``(G, U, G)`` law of the next global state given the state and the player's action."""
    if marginals is None:
        marginals = local_marginals(game, joint)
    loc, emp = game.locals_table, game.measure_of_state
    g = game.n_global_states
    others = np.ones((g, g))
    for j in range(game.n_players):
        if j != player:
            others *= marginals[j][:, loc[:, j]]
    own = game.transition[loc[:, player], emp][:, :, loc[:, player]]
    return own * others[:, None, :]


def observation_transitions(game: GameSpec, trans: np.ndarray, player: int) -> np.ndarray:
    """``(G, U, |Y|)`` law of the player's next observation."""
    onehot = np.zeros((game.n_global_states, game.n_observations))
    onehot[np.arange(game.n_global_states), game.obs_table[player]] = 1.0
    return trans @ onehot


def player_costs(game: GameSpec, player: int) -> np.ndarray:
    """``(G, U)`` stage cost of the player at each global state and own action."""
    return game.cost[game.locals_table[:, player], game.measure_of_state]


def _check_joint(game: GameSpec, joint) -> np.ndarray:
    kernels = np.asarray(getattr(joint, "kernels", joint), dtype=float)
    if kernels.shape != (game.n_players, game.n_observations, game.n_actions):
        raise ConfigError(
            f"joint policy shape {kernels.shape} does not match the game's "
            f"{(game.n_players, game.n_observations, game.n_actions)}"
        )
    return kernels


# -- MDPs --------------------------------------------------------------------

def induced_mdp(game: GameSpec, player: int, joint: JointPolicy) -> FiniteMdp:
    """MDP faced by ``player`` when everyone else plays ``joint`` (own entry ignored).

    Exists on the global channel, and on the mean-field channel when the
    other players are pairwise mean-field symmetric.
    """
    _check_joint(game, joint)
    trans = player_transitions(game, joint, player)
    costs = player_costs(game, player)
    variant = game.channel.variant
    if variant == GLOBAL:
        return FiniteMdp(trans, costs, game.discount)
    if variant != MEAN_FIELD:
        raise HypothesisError(f"no induced MDP exists on the {variant} channel")
    if not isinstance(joint, JointPolicy):
        tag = channel_tag(game)
        joint = JointPolicy([StationaryPolicy(k, tag) for k in np.asarray(joint, dtype=float)])
    if not others_symmetric(game, joint, player):
        raise HypothesisError("co-players are not mean-field symmetric; the induced MDP is undefined")
    obs_trans = observation_transitions(game, trans, player)
    phi = game.obs_table[player]
    labels = np.flatnonzero(game.reachable_observations[player])
    p = np.zeros((len(labels), game.n_actions, len(labels)))
    c = np.zeros((len(labels), game.n_actions))
    for k, y in enumerate(labels):
        pre = np.flatnonzero(phi == y)
        rows = obs_trans[pre]
        if np.max(np.abs(rows - rows[0])) > 1e-10:
            raise HypothesisError(f"next-observation law is not a function of observation {y}")
        p[k] = rows[0][:, labels]
        c[k] = costs[pre[0]]
    return FiniteMdp(p, c, game.discount, labels)


def bellman_operator(mdp: FiniteMdp, q: np.ndarray) -> np.ndarray:
    return mdp.cost + mdp.discount * mdp.transition @ q.min(axis=1)


def value_iteration(mdp: FiniteMdp, tol: float = 1e-10, max_iter: int = 10**7) -> np.ndarray:
    """Optimal Q-factors within ``tol`` in sup norm.

    Iterates the Bellman optimality operator until the fixed-point residual
    drops below ``tol * (1 - beta) / (2 * beta)``.
    """
    beta = mdp.discount
    stop = tol * (1.0 - beta) / (2.0 * beta)
    q = np.zeros_like(mdp.cost)
    for _ in range(max_iter):
        nxt = bellman_operator(mdp, q)
        if np.max(np.abs(nxt - q)) < stop:
            return nxt
        q = nxt
    raise RuntimeError("value iteration did not converge")


def evaluate_policy(mdp: FiniteMdp, policy: np.ndarray) -> np.ndarray:
    """Value of a stationary randomized ``policy[s, a]`` by a linear solve."""
    p_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    c_pi = np.einsum("sa,sa->s", policy, mdp.cost)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * p_pi, c_pi)


def policy_value(game: GameSpec, player: int, joint: JointPolicy) -> np.ndarray:
    """Discounted cost-to-go of ``player`` from every global state."""
    kernels = _check_joint(game, joint)
    k = exact_chain_kernel(game, kernels)
    act = kernels[player][game.obs_table[player]]
    c_pi = np.einsum("ga,ga->g", act, player_costs(game, player))
    return np.linalg.solve(np.eye(game.n_global_states) - game.discount * k, c_pi)


def belief_mdp(game: GameSpec, player: int, joint: JointPolicy, nu: np.ndarray | None = None) -> FiniteMdp:
    """Memory-0 approximate belief MDP of ``player`` on its reachable observations.

    Hidden states are weighted by the invariant measure of the chain under
    the whole joint policy, conditioned on the current observation.
    """
    kernels = _check_joint(game, joint)
    if not np.min(kernels) > 0:
        raise HypothesisError("belief MDP is only defined for soft joint policies")
    marginals = local_marginals(game, kernels)
    if nu is None:
        nu = invariant_measure(product_kernel(game, marginals))
    trans = player_transitions(game, kernels, player, marginals)
    obs_trans = observation_transitions(game, trans, player)
    costs = player_costs(game, player)
    return _aggregate(game, player, nu, obs_trans, costs)


def _aggregate(game, player, nu, obs_trans, costs) -> FiniteMdp:
    phi = game.obs_table[player]
    labels = np.flatnonzero(game.reachable_observations[player])
    member = np.zeros((len(labels), game.n_global_states))
    for k, y in enumerate(labels):
        member[k, phi == y] = 1.0
    weights = member * nu[None, :]
    mass = weights.sum(axis=1, keepdims=True)
    if np.any(mass <= 0):
        raise ChainStructureError("an observation in the image of the player's map has zero stationary mass")
    b = weights / mass
    c_hat = b @ costs
    p_hat = np.einsum("ys,sat->yat", b, obs_trans[:, :, labels])
    p_hat /= p_hat.sum(axis=2, keepdims=True)
    return FiniteMdp(p_hat, c_hat, game.discount, labels)


def non_soft_value(game: GameSpec) -> float:
    return game.cost_bound / (1.0 - game.discount) + 1.0


def subjective_functions(
    game: GameSpec, player: int, joint: JointPolicy, tol: float = 1e-12
) -> SubjectiveFunctions:
    """Naively learned value and Q-functions of ``player`` under ``joint``.

    For a soft joint policy ``w`` is the optimal Q-function and ``v`` the
    value of the player's own policy in the belief MDP; unreachable
    observations get 0. Otherwise ``v`` is the constant
    ``||c|| / (1 - beta) + 1`` and ``w`` is 0.
    """
    return analyze_joint(game, joint, players=[player], tol=tol)[0]


def analyze_joint(
    game: GameSpec, joint, players: Sequence[int] | None = None, tol: float = 1e-12
) -> list[SubjectiveFunctions]:
    """Subjective functions of several players, sharing one invariant measure."""
    kernels = _check_joint(game, joint)
    players = range(game.n_players) if players is None else players
    ny, nu_ = game.n_observations, game.n_actions
    if not np.min(kernels) > 0:
        out = []
        for i in players:
            out.append(
                SubjectiveFunctions(
                    np.full(ny, non_soft_value(game)),
                    np.zeros((ny, nu_)),
                    False,
                    game.reachable_observations[i].copy(),
                )
            )
        return out

    marginals = local_marginals(game, kernels)
    nu = invariant_measure(product_kernel(game, marginals))
    out = []
    for i in players:
        trans = player_transitions(game, kernels, i, marginals)
        mdp = _aggregate(game, i, nu, observation_transitions(game, trans, i), player_costs(game, i))
        w_r = value_iteration(mdp, tol)
        v_r = evaluate_policy(mdp, kernels[i][mdp.labels])
        v = np.zeros(ny)
        w = np.zeros((ny, nu_))
        v[mdp.labels] = v_r
        w[mdp.labels] = w_r
        out.append(SubjectiveFunctions(v, w, True, game.reachable_observations[i].copy()))
    return out


def subjective_gap(game: GameSpec, player: int, joint: JointPolicy) -> float:
    return float(np.max(subjective_functions(game, player, joint).gaps()))


def subjective_br_test(game: GameSpec, player: int, joint: JointPolicy, epsilon: float) -> bool:
    """Whether ``v(y) <= min_a w(y, a) + epsilon`` at every reachable observation."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    return subjective_gap(game, player, joint) <= epsilon + BR_ATOL


def objective_gap(game: GameSpec, player: int, joint: JointPolicy, tol: float = 1e-12) -> float:
    """``max_s J(s) - min_a Q*(phi(s), a)`` for the player's induced MDP."""
    mdp = induced_mdp(game, player, joint)
    q = value_iteration(mdp, tol)
    q_full = np.zeros((game.n_observations, game.n_actions))
    q_full[mdp.labels] = q
    j = policy_value(game, player, joint)
    best = q_full[game.obs_table[player]].min(axis=1)
    return float(np.max(j - best))


def objective_br_test(game: GameSpec, player: int, joint: JointPolicy, epsilon: float) -> bool:
    """Epsilon-optimality of the player's policy in its induced MDP, from every state.

    Refuses channels on which no induced MDP exists.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    return objective_gap(game, player, joint) <= epsilon + BR_ATOL


# -- Markov defect -----------------------------------------------------------

def markov_defect(game: GameSpec, player: int, channel, joint, horizon: int = 3) -> float:
    """Largest total-variation gap between history- and (y, u)-conditioned predictions.

    Histories ``(y_0, u_0, ..., y_t, u_t)`` with up to ``horizon``
    observations are enumerated exactly from the initial distribution; for
    each one the law of ``y_{t+1}`` given the full history is compared with
    its law given ``(y_t, u_t)`` alone at the same time ``t``.
    """
    if horizon < 2:
        raise ConfigError("horizon must be at least 2")
    if channel is not None and channel != game.channel:
        game = game.with_channel(channel)
    kernels = _check_joint(game, joint)
    trans = player_transitions(game, kernels, player)
    phi = game.obs_table[player]
    ny, nu_ = game.n_observations, game.n_actions
    reach = np.flatnonzero(game.reachable_observations[player])
    pi = kernels[player]

    n_nodes = sum((len(reach) * nu_) ** t for t in range(1, horizon + 1))
    if n_nodes * game.n_global_states > MAX_HISTORY_NODES * 64:
        raise GuardrailError(f"history enumeration would visit {n_nodes} nodes")

    # filter[s] = P(x_t = s, history up to y_t and u_{t-1})
    frontier = []
    for y in reach:
        alpha = game.initial_dist * (phi == y)
        if alpha.sum() > 0:
            frontier.append((int(y), alpha))
    worst = 0.0
    for _t in range(horizon):
        preds = []
        groups: dict[tuple[int, int], np.ndarray] = {}
        nxt_frontier = []
        for y, alpha in frontier:
            for u in range(nu_):
                if pi[y, u] <= 0:
                    continue
                joint_mass = alpha * pi[y, u]
                nxt_state = joint_mass @ trans[:, u, :]
                pred = np.bincount(phi, weights=nxt_state, minlength=ny)
                preds.append(((y, u), pred))
                groups[(y, u)] = groups.get((y, u), 0.0) + pred
                for y2 in reach:
                    a2 = nxt_state * (phi == y2)
                    if a2.sum() > 0:
                        nxt_frontier.append((int(y2), a2))
        for key, pred in preds:
            w = pred.sum()
            if w <= 0:
                continue
            ref = groups[key]
            tv = 0.5 * np.abs(pred / w - ref / ref.sum()).sum()
            worst = max(worst, float(tv))
        frontier = nxt_frontier
    return worst


# -- profile tables and tolerance constants ---------------------------------

def profile_count(qset: QuantizedPolicySet, n_players: int) -> int:
    return len(qset) ** n_players


def profile_from_index(index: int, size: int, n_players: int) -> tuple[int, ...]:
    """Mixed-radix decoding with player 0 most significant."""
    out = []
    for _ in range(n_players):
        index, r = divmod(index, size)
        out.append(r)
    return tuple(reversed(out))


def profile_index(profile: Sequence[int], size: int) -> int:
    idx = 0
    for k in profile:
        idx = idx * size + int(k)
    return idx


class ProfileTable:
    """Subjective-gap data for every profile of a shared quantized set.

    ``gap[p, i]`` is player ``i``'s largest subjective gap under profile
    index ``p``; ``state_gaps[p][i]`` keeps the per-observation gaps used to
    form tolerance gap sets. On the global channel the per-state gap uses the
    exact value function, which coincides with ``v``.
    """

    def __init__(self, game: GameSpec, qset: QuantizedPolicySet, max_profiles: int = MAX_PROFILES):
        if qset.tag != f"{game.channel.variant}[{game.n_observations}]":
            raise ConfigError("quantized set was built for a different channel than the game's")
        n = game.n_players
        total = profile_count(qset, n)
        if total > max_profiles:
            raise GuardrailError(f"{total} profiles exceed the enumeration limit {max_profiles}")
        self.game = game
        self.qset = qset
        self.n_profiles = total
        self.gap = np.empty((total, n))
        self.state_gaps: list[list[np.ndarray]] = []
        for p in range(total):
            prof = profile_from_index(p, len(qset), n)
            funcs = analyze_joint(game, qset.joint_kernels(prof))
            gaps = [f.gaps() for f in funcs]
            self.state_gaps.append(gaps)
            self.gap[p] = [g.max() for g in gaps]

    def profiles(self):
        for p in range(self.n_profiles):
            yield profile_from_index(p, len(self.qset), self.game.n_players)

    def index(self, profile: Sequence[int]) -> int:
        return profile_index(profile, len(self.qset))

    def satisfied(self, profile: Sequence[int], epsilon: float) -> np.ndarray:
        return self.gap[self.index(profile)] <= epsilon + BR_ATOL

    def equilibrium_mask(self, epsilon: float) -> np.ndarray:
        return np.all(self.gap <= epsilon + BR_ATOL, axis=1)

    def gap_values(self) -> np.ndarray:
        return np.concatenate([g for gaps in self.state_gaps for g in gaps])


def tolerance_report(
    game: GameSpec,
    qset: QuantizedPolicySet,
    epsilon: float,
    player_tolerances: Sequence[float],
    revision_probs: Sequence[float],
    table: ProfileTable | None = None,
    path_bound: int | None = None,
) -> ToleranceReport:
    """Learning-tolerance constants for a quantized set.

    ``d_bar`` is the smallest nonzero ``|epsilon - gap|`` over profiles,
    players and reachable observations; ``xi_accuracy`` is
    ``min_i min(d_i, d_bar - d_i) / 2``; ``p_min`` is
    ``prod_i (e_i / |set|) ** path_bound`` with ``path_bound`` the longest
    constructed satisficing path (in revision steps) over all start profiles.
    """
    n = game.n_players
    d = tuple(float(x) for x in player_tolerances)
    e = tuple(float(x) for x in revision_probs)
    if len(d) != n or len(e) != n:
        raise ConfigError("need one tolerance and one revision probability per player")
    table = table or ProfileTable(game, qset)
    gap_set = np.abs(epsilon - table.gap_values())
    nonzero = gap_set[gap_set > ZERO_GAP]
    d_bar = float(nonzero.min()) if nonzero.size else None
    if d_bar is None:
        flagged = list(range(n))
        xi = None
    else:
        flagged = [i for i, di in enumerate(d) if not 0.0 < di < d_bar]
        xi = 0.5 * min(min(di, d_bar - di) for di in d)
    if path_bound is None:
        from .satisficing import longest_constructed_path

        path_bound = longest_constructed_path(game, qset, epsilon, table)
    p_min = math.prod((ei / len(qset)) ** path_bound for ei in e)
    return ToleranceReport(d_bar, gap_set, xi, p_min, int(path_bound), float(epsilon), d, e, flagged)


# -- CSV export --------------------------------------------------------------

def write_value_tables_csv(path, game: GameSpec, joint: JointPolicy) -> None:
    """One row per (player, observation, action) with ``v`` and ``w``; global value per state too."""
    path = Path(path)
    funcs = analyze_joint(game, joint)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["schema", "table", "player", "ordinal", "action", "value"])
        for i, f in enumerate(funcs):
            j = policy_value(game, i, joint)
            for s, val in enumerate(j):
                wr.writerow(["v1", "J", i, s, "", repr(float(val))])
            for y in range(game.n_observations):
                wr.writerow(["v1", "V", i, y, "", repr(float(f.v[y]))])
                for a in range(game.n_actions):
                    wr.writerow(["v1", "W", i, y, a, repr(float(f.w[y, a]))])
            if game.channel.variant in (GLOBAL, MEAN_FIELD):
                try:
                    mdp = induced_mdp(game, i, joint)
                except HypothesisError:
                    continue
                q = value_iteration(mdp, 1e-12)
                for k, y in enumerate(mdp.labels):
                    for a in range(game.n_actions):
                        wr.writerow(["v1", "Qstar", i, int(y), a, repr(float(q[k, a]))])


def write_tolerance_csv(path, report: ToleranceReport) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["schema", "field", "value"])
        for key, val in report.to_dict().items():
            wr.writerow(["v1", key, val])
        for k, g in enumerate(np.sort(report.gap_set)):
            wr.writerow(["v1", f"gap_set[{k}]", repr(float(g))])
