"""Built-in games.

The "crowd" family: each player sits in one of two locations and either stays
or tries to switch. Cost grows with the share of players at one's own
location, location 1 carries a fixed surcharge and switching costs effort.
Switching succeeds less often when the destination is crowded. Every
transition probability is positive, so every soft joint policy induces an
irreducible aperiodic chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .game import GameSpec, ObservationChannel, enumerate_empirical_measures


@dataclass(frozen=True)
class CrowdParams:
    crowd_weight: float = 0.6
    surcharge: float = 0.25
    effort: float = 0.15
    stay_keep: float = 0.9
    switch_base: float = 0.8
    switch_crowding: float = 0.2


def crowd_tables(n_players: int, params: CrowdParams = CrowdParams()) -> tuple[np.ndarray, np.ndarray]:
    measures = enumerate_empirical_measures(n_players, 2)
    cost = np.zeros((2, len(measures), 2))
    trans = np.zeros((2, len(measures), 2, 2))
    for m in measures:
        share = m.weights
        for x in range(2):
            other = 1 - x
            for a in range(2):
                cost[x, m.index, a] = params.crowd_weight * share[x] + params.surcharge * x + params.effort * a
            trans[x, m.index, 0, x] = params.stay_keep
            trans[x, m.index, 0, other] = 1.0 - params.stay_keep
            flip = params.switch_base - params.switch_crowding * share[other]
            trans[x, m.index, 1, other] = flip
            trans[x, m.index, 1, x] = 1.0 - flip
    return cost, trans


def crowding_classes(n_players: int) -> tuple[int, ...]:
    """Two classes: at most one player at location 1, or more than one."""
    return tuple(1 if m.counts[1] <= 1 else 2 for m in enumerate_empirical_measures(n_players, 2))


def crowd_game(
    n_players: int,
    variant: str = "global",
    discount: float = 0.5,
    params: CrowdParams = CrowdParams(),
    name: str = "",
) -> GameSpec:
    cost, trans = crowd_tables(n_players, params)
    if variant == "compressed":
        channel = ObservationChannel.compressed(2, crowding_classes(n_players))
    else:
        channel = ObservationChannel(variant)
    g = 2**n_players
    return GameSpec(
        n_players,
        2,
        2,
        discount,
        cost,
        trans,
        np.full(g, 1.0 / g),
        channel,
        name=name or f"crowd{n_players}_{variant}",
    )


# Switching is expensive relative to crowding, so subjective gaps fall into
# well separated clusters and learning tolerances can be generous.
COSTLY_SWITCH = CrowdParams(crowd_weight=0.3, surcharge=0.1, effort=0.7)


def switch_game(n_players: int, variant: str = "global") -> GameSpec:
    return crowd_game(n_players, variant, 0.3, COSTLY_SWITCH, name=f"switch{n_players}_{variant}")


def trivial_game() -> GameSpec:
    """One player, one state, one action, zero cost."""
    return GameSpec(
        1, 1, 1, 0.5, np.zeros((1, 1, 1)), np.ones((1, 1, 1, 1)), np.ones(1),
        ObservationChannel.local(), name="trivial1",
    )


FIXTURES = {
    "crowd2_global": lambda: crowd_game(2, "global"),
    "crowd2_mean_field": lambda: crowd_game(2, "mean_field"),
    "crowd2_compressed": lambda: crowd_game(2, "compressed"),
    "crowd2_local": lambda: crowd_game(2, "local"),
    "crowd3_global": lambda: crowd_game(3, "global"),
    "crowd3_mean_field": lambda: crowd_game(3, "mean_field"),
    "crowd3_compressed": lambda: crowd_game(3, "compressed"),
    "crowd4_global": lambda: crowd_game(4, "global"),
    "crowd4_mean_field": lambda: crowd_game(4, "mean_field"),
    "crowd4_compressed": lambda: crowd_game(4, "compressed"),
    "switch2_global": lambda: switch_game(2, "global"),
    "switch2_mean_field": lambda: switch_game(2, "mean_field"),
    "switch2_compressed": lambda: switch_game(2, "compressed"),
    "switch3_mean_field": lambda: switch_game(3, "mean_field"),
    "switch4_compressed": lambda: switch_game(4, "compressed"),
    "trivial1": trivial_game,
}


def fixture(name: str) -> GameSpec:
    try:
        return FIXTURES[name]()
    except KeyError:
        raise ConfigError(f"unknown fixture {name!r}; known: {sorted(FIXTURES)}") from None


def list_fixtures() -> list[str]:
    return sorted(FIXTURES)
