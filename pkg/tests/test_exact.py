import numpy as np
import pytest

from mfglab.errors import ChainStructureError, ConfigError, HypothesisError
from mfglab.exact import (
    FiniteMdp,
    ProfileTable,
    analyze_joint,
    belief_mdp,
    check_chain_structure,
    evaluate_policy,
    induced_mdp,
    invariant_measure,
    markov_defect,
    non_soft_value,
    objective_gap,
    policy_value,
    profile_from_index,
    profile_index,
    subjective_br_test,
    subjective_functions,
    subjective_gap,
    tolerance_report,
    value_iteration,
    write_tolerance_csv,
    write_value_tables_csv,
)
from mfglab.fixtures import fixture
from mfglab.policy import JointPolicy, StationaryPolicy, build_quantization, channel_tag, lift_mean_field_policy

from oracles import (
    brute_belief_functions,
    brute_chain_kernel,
    brute_induced_global,
    policy_iteration,
    random_chain,
    random_mdp,
    stationary_linear,
)

# Values frozen from the loop-based oracles in tests/oracles.py.
FROZEN_GAPS = [
    ("crowd2_global", (4, 4), 0, 0.23169933551503408),
    ("crowd2_compressed", (0, 8), 1, 0.39384964584293125),
    ("crowd3_mean_field", (2, 2, 6), 0, 0.06638332494455379),
    ("switch2_global", (0, 0), 0, 0.05295308977449012),
]
FROZEN_EQUILIBRIA = [
    ("crowd2_global", 0.15, 6, 0.0013316305025644903),
    ("crowd2_compressed", 0.15, 12, 0.0007567570475393859),
    ("switch2_global", 0.243, 1, 0.15373971212703008),
]


def local_set(game):
    return build_quantization(game, kernel_space="local")


def test_chain_structure_checks():
    with pytest.raises(ChainStructureError, match="reducible"):
        check_chain_structure(np.eye(2))
    with pytest.raises(ChainStructureError, match="periodic"):
        check_chain_structure(np.array([[0.0, 1.0], [1.0, 0.0]]))
    check_chain_structure(np.array([[0.5, 0.5], [1.0, 0.0]]))


def test_invariant_measure_against_linear_solve():
    rng = np.random.default_rng(1)
    for n in (2, 5, 16):
        k = random_chain(rng, n)
        assert np.allclose(invariant_measure(k), stationary_linear(k), atol=1e-10)


def test_mdp_validation():
    with pytest.raises(ConfigError):
        FiniteMdp(np.ones((2, 1, 2)), np.zeros((2, 1)), 0.5)
    with pytest.raises(ConfigError):
        FiniteMdp(np.full((2, 1, 2), 0.5), np.zeros((2, 1)), 1.0)


def test_value_iteration_matches_policy_iteration():
    rng = np.random.default_rng(2)
    for beta in (0.3, 0.9):
        p, c, _ = random_mdp(rng, 6, 3, beta)
        mdp = FiniteMdp(p, c, beta)
        assert np.max(np.abs(value_iteration(mdp, 1e-10) - policy_iteration(p, c, beta))) <= 1e-10


def test_evaluate_policy_fixed_point():
    rng = np.random.default_rng(3)
    p, c, beta = random_mdp(rng, 5, 2, 0.7)
    mdp = FiniteMdp(p, c, beta)
    pi = rng.dirichlet(np.ones(2), size=5)
    v = evaluate_policy(mdp, pi)
    rhs = np.einsum("sa,sa->s", pi, c) + beta * np.einsum("sa,sat,t->s", pi, p, v)
    assert np.allclose(v, rhs, atol=1e-12)


def test_induced_mdp_global_matches_brute_force(crowd2, local9):
    kern = local9.joint_kernels((2, 7))
    for i in range(2):
        mdp = induced_mdp(crowd2, i, local9.joint((2, 7)))
        p, c = brute_induced_global(crowd2, kern, i)
        assert np.allclose(mdp.transition, p, atol=1e-14)
        assert np.allclose(mdp.cost, c)


def test_induced_mdp_refuses_compressed():
    g = fixture("crowd2_compressed")
    with pytest.raises(HypothesisError):
        induced_mdp(g, 0, local_set(g).joint((0, 0)))


def test_induced_mdp_mean_field_needs_symmetric_others():
    g = fixture("crowd3_mean_field")
    q = local_set(g)
    mdp = induced_mdp(g, 0, q.joint((1, 5, 5)))
    assert mdp.n_states == 6  # (x, mu) pairs with mu(x) > 0
    with pytest.raises(HypothesisError):
        induced_mdp(g, 0, q.joint((1, 5, 3)))
    # raw kernel arrays are accepted too
    assert np.allclose(induced_mdp(g, 0, q.joint_kernels((1, 5, 5))).transition, mdp.transition)


def test_mean_field_induced_mdp_consistent_with_global():
    """Q* on (x, mu) equals Q* on the global channel for mean-field type others."""
    gm = fixture("crowd3_mean_field")
    gg = fixture("crowd3_global")
    q = local_set(gm)
    kern = q.joint_kernels((0, 6, 6))
    mdp_m = induced_mdp(gm, 0, kern)
    lifted = JointPolicy([lift_mean_field_policy(kern[i], i, gg) for i in range(3)])
    mdp_g = induced_mdp(gg, 0, lifted)
    qm = value_iteration(mdp_m, 1e-12)
    qg = value_iteration(mdp_g, 1e-12)
    for s in range(gg.n_global_states):
        y = gm.obs_table[0, s]
        k = int(np.flatnonzero(mdp_m.labels == y)[0])
        assert np.allclose(qg[s], qm[k], atol=1e-10)


@pytest.mark.parametrize("name,prof,player,gap", FROZEN_GAPS)
def test_subjective_gap_frozen(name, prof, player, gap):
    g = fixture(name)
    joint = local_set(g).joint(prof)
    assert subjective_gap(g, player, joint) == pytest.approx(gap, abs=1e-10)


@pytest.mark.parametrize("name,prof,player,_gap", FROZEN_GAPS)
def test_subjective_functions_match_oracle(name, prof, player, _gap):
    g = fixture(name)
    q = local_set(g)
    f = subjective_functions(g, player, q.joint(prof))
    labels, v, w = brute_belief_functions(g, q.joint_kernels(prof), player)
    assert np.allclose(f.v[labels], v, atol=1e-10)
    assert np.allclose(f.w[labels], w, atol=1e-10)


def test_subjective_equals_objective_on_global(crowd2, local9):
    for prof in [(0, 0), (3, 5), (8, 1)]:
        joint = local9.joint(prof)
        for i in range(2):
            assert subjective_gap(crowd2, i, joint) == pytest.approx(objective_gap(crowd2, i, joint), abs=1e-10)


def test_value_of_own_policy_on_global(crowd2, local9):
    joint = local9.joint((3, 5))
    f = subjective_functions(crowd2, 0, joint)
    assert np.allclose(f.v, policy_value(crowd2, 0, joint), atol=1e-10)


def test_non_soft_joint_functions():
    g = fixture("crowd2_compressed")
    tag = channel_tag(g)
    det = StationaryPolicy.deterministic([0, 1, 0, 1], 2, tag)
    joint = JointPolicy([det, StationaryPolicy.uniform(4, 2, tag)])
    f = subjective_functions(g, 1, joint)
    assert not f.soft_flag
    assert np.all(f.v == non_soft_value(g)) and np.all(f.w == 0)
    assert non_soft_value(g) == pytest.approx(g.cost_bound / (1 - g.discount) + 1)
    assert not subjective_br_test(g, 1, joint, 1.0)
    with pytest.raises(HypothesisError):
        belief_mdp(g, 0, joint)


def test_unreachable_observations_are_zero_and_ignored():
    g = fixture("crowd2_mean_field")
    f = subjective_functions(g, 0, local_set(g).joint((4, 4)))
    unreachable = ~g.reachable_observations[0]
    assert unreachable.any()
    assert np.all(f.v[unreachable] == 0) and np.all(f.w[unreachable] == 0)
    assert f.gaps().shape == (int((~unreachable).sum()),)


def test_br_test_rejects_negative_epsilon(crowd2, local9):
    with pytest.raises(ValueError):
        subjective_br_test(crowd2, 0, local9.joint((0, 0)), -0.1)


def test_analyze_joint_matches_single_player_calls(crowd2, local9):
    joint = local9.joint((6, 2))
    both = analyze_joint(crowd2, joint)
    for i in range(2):
        f = subjective_functions(crowd2, i, joint)
        assert np.array_equal(f.w, both[i].w)


def test_markov_defect():
    g = fixture("crowd2_global")
    q = local_set(g)
    assert markov_defect(g, 0, None, q.joint((3, 7))) <= 1e-10
    gm = fixture("crowd3_mean_field")
    qm = local_set(gm)
    assert markov_defect(gm, 0, None, qm.joint((1, 5, 5))) <= 1e-10
    assert markov_defect(gm, 0, None, qm.joint((1, 0, 8))) > 1e-3
    gc = fixture("crowd2_compressed")
    assert markov_defect(gc, 0, None, local_set(gc).joint((1, 0))) > 1e-3


def test_profile_index_round_trip():
    for p in range(0, 9**3, 37):
        prof = profile_from_index(p, 9, 3)
        assert profile_index(prof, 9) == p
    assert profile_from_index(1, 9, 2) == (0, 1)


@pytest.mark.parametrize("name,eps,n_eq,d_bar", FROZEN_EQUILIBRIA)
def test_profile_table_and_tolerances(name, eps, n_eq, d_bar):
    g = fixture(name)
    q = local_set(g)
    table = ProfileTable(g, q)
    assert int(table.equilibrium_mask(eps).sum()) == n_eq
    rep = tolerance_report(g, q, eps, [d_bar / 2] * 2, [0.5, 0.5], table=table)
    assert rep.d_bar == pytest.approx(d_bar, abs=1e-10)
    assert rep.xi_accuracy == pytest.approx(d_bar / 4, abs=1e-10)
    assert rep.valid
    assert rep.p_min == pytest.approx((0.5 / 9) ** (2 * rep.path_bound))


def test_tolerance_report_flags_bad_tolerances():
    g = fixture("switch2_global")
    q = local_set(g)
    rep = tolerance_report(g, q, 0.243, [0.5, 0.01], [0.5, 0.5], path_bound=1)
    assert rep.flagged_players == [0] and not rep.valid
    with pytest.raises(ConfigError):
        tolerance_report(g, q, 0.243, [0.01], [0.5, 0.5], path_bound=1)


def test_csv_exports(tmp_path, crowd2, local9):
    write_value_tables_csv(tmp_path / "v.csv", crowd2, local9.joint((0, 0)))
    rows = (tmp_path / "v.csv").read_text().splitlines()
    assert rows[0] == "schema,table,player,ordinal,action,value"
    assert sum(r.split(",")[1] == "Qstar" for r in rows[1:]) == 2 * 4 * 2
    rep = tolerance_report(crowd2, local9, 0.15, [0.0005] * 2, [0.5] * 2, path_bound=3)
    write_tolerance_csv(tmp_path / "t.csv", rep)
    assert "d_bar" in (tmp_path / "t.csv").read_text()


def test_chain_kernel_brute_force_three_players():
    from mfglab.game import exact_chain_kernel

    g = fixture("crowd3_compressed")
    q = local_set(g)
    kern = q.joint_kernels((1, 4, 8))
    assert np.allclose(exact_chain_kernel(g, kern), brute_chain_kernel(g, kern), atol=1e-14)


# -- closed forms and degenerate games ------------------------------------------

from mfglab.game import GameSpec  # noqa: E402
from mfglab.exact import objective_br_test  # noqa: E402

from oracles import monte_carlo_value, simulate_own_transitions  # noqa: E402


def constant_cost_game(value=1.0, beta=0.5):
    g = fixture("crowd2_global")
    return GameSpec(2, 2, 2, beta, np.full_like(g.cost, value), g.transition, g.initial_dist)


def single_player_game(variant="global"):
    from mfglab.fixtures import crowd_game

    return crowd_game(1, variant)


def test_invariant_measure_closed_forms():
    assert np.allclose(invariant_measure(np.full((2, 2), 0.5)), [0.5, 0.5])
    a, b = 0.3, 0.1
    assert np.allclose(invariant_measure(np.array([[1 - a, a], [b, 1 - b]])), [b / (a + b), a / (a + b)], atol=1e-10)


def test_invariant_measure_random_soft_policy_chain():
    from mfglab.game import exact_chain_kernel

    g = fixture("crowd2_global")
    kern = np.random.default_rng(8).dirichlet(np.ones(2), size=(2, 4))
    k = exact_chain_kernel(g, kern)
    assert np.max(np.abs(invariant_measure(k) - stationary_linear(k))) <= 1e-9


def test_single_player_induced_mdp_is_the_game_itself():
    for variant in ("global", "mean_field"):
        g = single_player_game(variant)
        pol = np.full((1, g.n_observations, 2), 0.5)
        mdp = induced_mdp(g, 0, pol)
        for k, y in enumerate(mdp.labels):
            x = int(g.locals_table[np.flatnonzero(g.obs_table[0] == y)[0], 0])
            e = x  # the only measure is the Dirac at x
            assert np.allclose(mdp.cost[k], g.cost[x, e])
            nxt = mdp.transition[k]
            for k2, y2 in enumerate(mdp.labels):
                x2 = int(g.locals_table[np.flatnonzero(g.obs_table[0] == y2)[0], 0])
                assert np.allclose(nxt[:, k2], g.transition[x, e, :, x2])


def test_constant_cost_closed_forms(local9):
    g = constant_cost_game()
    joint = local9.joint((2, 5))
    mdp = induced_mdp(g, 0, joint)
    assert np.all(mdp.cost == 1.0)
    assert np.allclose(value_iteration(mdp, 1e-12), 2.0, atol=1e-10)
    assert np.allclose(policy_value(g, 0, joint), 2.0, atol=1e-12)


def test_value_iteration_one_state_two_actions():
    mdp = FiniteMdp(np.ones((1, 2, 1)), np.array([[0.0, 1.0]]), 0.9)
    assert np.allclose(value_iteration(mdp, 1e-12), [[0.0, 1.0]], atol=1e-10)


def test_policy_value_small_discount_is_one_step_cost(local9):
    g0 = fixture("crowd2_global")
    g = GameSpec(2, 2, 2, 0.01, g0.cost, g0.transition, g0.initial_dist)
    joint = local9.joint((2, 5))
    act = joint.kernels[0][g.obs_table[0]]
    c_pi = np.einsum("ga,ga->g", act, g.cost[g.locals_table[:, 0], g.measure_of_state])
    assert np.max(np.abs(policy_value(g, 0, joint) - c_pi)) <= 0.02 * g.cost_bound


def test_policy_value_against_monte_carlo(crowd2, local9):
    joint = local9.joint((2, 5))
    j = policy_value(crowd2, 0, joint)
    for start in (0, 3):
        mean, se = monte_carlo_value(crowd2, joint.kernels, 0, start, 100_000, 40, seed=start)
        assert abs(mean - j[start]) <= 3 * se


def test_belief_mdp_on_global_channel_is_the_induced_mdp(crowd2, local9):
    joint = local9.joint((6, 1))
    b = belief_mdp(crowd2, 1, joint)
    m = induced_mdp(crowd2, 1, joint)
    assert np.allclose(b.transition, m.transition, atol=1e-13) and np.allclose(b.cost, m.cost)


def test_belief_mdp_single_player_ignores_measure():
    g = single_player_game("local")
    pol = np.full((1, 2, 2), 0.5)
    b1 = belief_mdp(g, 0, pol)
    b2 = belief_mdp(g, 0, pol, nu=np.array([0.9, 0.1]))
    assert np.allclose(b1.transition, b2.transition) and np.allclose(b1.cost, b2.cost)
    for x in range(2):
        assert np.allclose(b1.transition[x], g.transition[x, x])


def test_belief_mdp_rows_match_long_run_observation_frequencies():
    g = fixture("crowd2_compressed")
    q = local_set(g)
    prof = (4, 1)
    b = belief_mdp(g, 0, q.joint(prof))
    counts = simulate_own_transitions(g, q.joint_kernels(prof), 0, 10**6, seed=21)
    phi = g.obs_table[0]
    obs_counts = np.zeros((g.n_observations, g.n_actions, g.n_observations))
    for s in range(g.n_global_states):
        for s2 in range(g.n_global_states):
            obs_counts[phi[s], :, phi[s2]] += counts[s, :, s2]
    for k, y in enumerate(b.labels):
        for a in range(g.n_actions):
            total = obs_counts[y, a].sum()
            freq = obs_counts[y, a, b.labels] / total
            sd = np.sqrt(b.transition[k, a] * (1 - b.transition[k, a]) / total)
            assert np.all(np.abs(freq - b.transition[k, a]) <= 3 * sd + 1e-12)


def test_non_soft_constant_with_unit_cost_bound():
    g0 = fixture("crowd2_global")
    cost = g0.cost / g0.cost_bound
    g = GameSpec(2, 2, 2, 0.5, cost, g0.transition, g0.initial_dist)
    assert g.cost_bound == pytest.approx(1.0)
    hard = np.zeros((2, 4, 2))
    hard[..., 0] = 1.0
    f = subjective_functions(g, 0, hard)
    assert np.allclose(f.v, 3.0) and np.all(f.w == 0)
    assert not subjective_br_test(g, 0, hard, 2.999)
    assert subjective_br_test(g, 0, hard, 3.0)


def test_mean_field_w_equals_induced_q():
    g = fixture("crowd3_mean_field")
    q = local_set(g)
    joint = q.joint((7, 3, 3))
    f = subjective_functions(g, 0, joint)
    mdp = induced_mdp(g, 0, joint)
    assert np.max(np.abs(f.w[mdp.labels] - value_iteration(mdp, 1e-12))) <= 1e-8


def test_br_test_threshold(crowd2, local9):
    joint = local9.joint((3, 5))
    gap = subjective_gap(crowd2, 0, joint)
    assert subjective_br_test(crowd2, 0, joint, gap)
    assert not subjective_br_test(crowd2, 0, joint, gap - 1e-6)
    assert objective_br_test(crowd2, 0, joint, gap) and not objective_br_test(crowd2, 0, joint, gap - 1e-6)


def test_greedy_policy_is_an_objective_best_response(crowd2, local9):
    others = local9.joint((0, 5))
    q = value_iteration(induced_mdp(crowd2, 0, others), 1e-12)
    greedy = StationaryPolicy.deterministic(np.argmin(q, axis=1), 2, channel_tag(crowd2))
    joint = others.replace(0, greedy)
    assert objective_br_test(crowd2, 0, joint, 1e-10)


def test_uniform_policy_is_not_an_exact_best_response(crowd2):
    tag = channel_tag(crowd2)
    joint = JointPolicy([StationaryPolicy.uniform(4, 2, tag)] * 2)
    gap = objective_gap(crowd2, 0, joint)
    assert gap > 0.01
    assert not objective_br_test(crowd2, 0, joint, 0.0)


def test_single_player_objective_test_is_plain_optimality():
    g = single_player_game("global")
    q = value_iteration(induced_mdp(g, 0, np.full((1, 2, 2), 0.5)), 1e-12)
    j = evaluate_policy(induced_mdp(g, 0, np.full((1, 2, 2), 0.5)), np.full((2, 2), 0.5))
    gap = float(np.max(j - q.min(axis=1)))
    pol = JointPolicy([StationaryPolicy.uniform(2, 2, channel_tag(g))])
    assert objective_gap(g, 0, pol) == pytest.approx(gap, abs=1e-10)


def test_tolerance_constants_small_example():
    g = fixture("crowd2_global")
    q4 = build_quantization(g, resolution=1, softness_floor=0.05, kernel_space="local")
    assert len(q4) == 4
    table = ProfileTable(g, q4)
    rep = tolerance_report(g, q4, 0.15, [0.0001] * 2, [0.1, 0.1], table=table, path_bound=2)
    assert rep.p_min == pytest.approx(3.90625e-7, rel=1e-12)
    gaps = np.abs(0.15 - table.gap_values())
    assert rep.d_bar == pytest.approx(gaps[gaps > 1e-12].min())
    assert rep.xi_accuracy == pytest.approx(0.5 * min(0.0001, rep.d_bar - 0.0001))


class _StubTable:
    def __init__(self, gaps):
        self._gaps = np.asarray(gaps)

    def gap_values(self):
        return self._gaps


def test_tolerance_formulas_on_a_known_gap_set():
    g = fixture("crowd2_global")
    q = local_set(g)
    eps = 0.2
    stub = _StubTable([eps - 0.0, eps - 0.05, eps - 0.12])
    rep = tolerance_report(g, q, eps, [0.02, 0.02], [0.1, 0.1], table=stub, path_bound=2)
    assert rep.d_bar == pytest.approx(0.05)
    assert rep.xi_accuracy == pytest.approx(0.01)
    assert rep.valid
    empty = tolerance_report(g, q, eps, [0.02, 0.02], [0.1, 0.1], table=_StubTable([eps]), path_bound=0)
    assert empty.d_bar is None and not empty.valid and empty.p_min == 1.0
