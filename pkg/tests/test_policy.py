import numpy as np
import pytest

from mfglab.errors import ConfigError, GuardrailError, HypothesisError
from mfglab.fixtures import fixture
from mfglab.game import ObservationChannel
from mfglab.policy import (
    JointPolicy,
    StationaryPolicy,
    build_quantization,
    channel_tag,
    is_mean_field_symmetric,
    is_mean_field_type,
    is_soft,
    is_soft_joint,
    joint_distance,
    lift_mean_field_policy,
    policy_distance,
    project_mean_field_policy,
    reachable_mean_field_rows,
    set_from_dict,
    simplex_grid,
)


def test_policy_validation():
    with pytest.raises(ConfigError):
        StationaryPolicy(np.array([[0.5, 0.6]]))
    with pytest.raises(ConfigError):
        StationaryPolicy(np.array([[1.2, -0.2]]))
    with pytest.raises(ConfigError):
        StationaryPolicy(np.ones(3) / 3)


def test_uniform_and_deterministic():
    u = StationaryPolicy.uniform(4, 2)
    assert is_soft(u, 0.5) and not is_soft(u, 0.51)
    d = StationaryPolicy.deterministic([0, 1, 1], 2)
    assert np.array_equal(d.kernel, [[1, 0], [0, 1], [0, 1]])
    assert not is_soft(d, 1e-9)


def test_distances():
    a = StationaryPolicy(np.array([[0.5, 0.5], [0.2, 0.8]]))
    b = StationaryPolicy(np.array([[0.5, 0.5], [0.6, 0.4]]))
    assert policy_distance(a, b) == pytest.approx(0.4)
    assert joint_distance(JointPolicy([a, a]), JointPolicy([a, b])) == pytest.approx(0.4)
    with pytest.raises(ConfigError):
        policy_distance(a, StationaryPolicy(np.array([[1.0, 0.0]])))


def test_joint_requires_shared_space():
    with pytest.raises(ConfigError):
        JointPolicy([StationaryPolicy.uniform(2, 2, "a[2]"), StationaryPolicy.uniform(2, 2, "b[2]")])
    with pytest.raises(ConfigError):
        JointPolicy([])


def test_policy_round_trip():
    j = JointPolicy([StationaryPolicy(np.array([[0.3, 0.7]]), "local[1]")] * 2)
    back = JointPolicy.from_dict(j.to_dict())
    assert np.array_equal(back.kernels, j.kernels) and back.channel_tag == "local[1]"


def test_is_soft_joint():
    assert is_soft_joint(JointPolicy([StationaryPolicy.uniform(2, 2)] * 2))
    assert not is_soft_joint(JointPolicy([StationaryPolicy.uniform(2, 2), StationaryPolicy.deterministic([0, 0], 2)]))


def test_simplex_grid():
    g = simplex_grid(2, 2)
    assert np.allclose(g, [[1, 0], [0.5, 0.5], [0, 1]])
    assert len(simplex_grid(3, 3)) == 10


def test_quantization_size_softness_and_cover(crowd2):
    q = build_quantization(crowd2, resolution=2, softness_floor=0.05, kernel_space="local")
    assert len(q) == 9
    assert np.min(q.lifted) == pytest.approx(0.05)
    assert q.covering_radius == pytest.approx(0.6)
    # every deterministic local policy is within the covering radius
    for acts in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        det = StationaryPolicy(np.eye(2)[list(acts)][crowd2.locals_table[:, 0]], q.tag)
        _, d = q.nearest_member(det)
        assert d <= q.covering_radius


def test_quantization_member_values(crowd2):
    q = build_quantization(crowd2, resolution=2, softness_floor=0.05, kernel_space="local")
    assert np.allclose(q.members[0], [[0.95, 0.05], [0.95, 0.05]])
    assert np.allclose(q.members[4], [[0.5, 0.5], [0.5, 0.5]])
    assert np.allclose(q.members[5], [[0.5, 0.5], [0.05, 0.95]])


def test_quantization_lifted_per_player(crowd2):
    q = build_quantization(crowd2, resolution=2, softness_floor=0.05, kernel_space="local")
    # global state index 1 is (s0=1, s1=0)
    assert np.allclose(q.lifted[5, 0, 1], [0.05, 0.95])
    assert np.allclose(q.lifted[5, 1, 1], [0.5, 0.5])


def test_quantization_errors(crowd2):
    with pytest.raises(ConfigError):
        build_quantization(crowd2, softness_floor=0.5)
    with pytest.raises(ConfigError):
        build_quantization(crowd2, resolution=0)
    with pytest.raises(GuardrailError):
        build_quantization(crowd2, resolution=20, kernel_space="observation")
    with pytest.raises(ConfigError):
        build_quantization(fixture("crowd2_compressed"), kernel_space="mean_field")


def test_quantization_restricted_rows(crowd2):
    q = build_quantization(crowd2, kernel_space="local", restrict_to=[0])
    assert len(q) == 3
    assert np.allclose(q.members[:, 1], 0.5)


def test_quantization_mean_field_space_uses_reachable_rows(crowd2):
    mask = reachable_mean_field_rows(crowd2)
    # x=0 with all players at 1 and x=1 with all players at 0 never occur
    assert mask.tolist() == [True, True, False, False, True, True]
    q = build_quantization(crowd2, kernel_space="mean_field", restrict_to=None, max_size=10**5)
    assert len(q) == 3**4


def test_set_round_trip(crowd2, local9):
    back = set_from_dict(crowd2, local9.to_dict())
    assert np.array_equal(back.lifted, local9.lifted)


def test_lift_and_project_mean_field(crowd2):
    rng = np.random.default_rng(0)
    k = rng.dirichlet(np.ones(2), size=6)
    for i in range(2):
        pol = lift_mean_field_policy(k, i, crowd2)
        assert is_mean_field_type(pol, i, crowd2)
        proj = project_mean_field_policy(pol, i, crowd2)
        mask = reachable_mean_field_rows(crowd2)
        assert np.allclose(proj[mask], k[mask])
        assert np.allclose(proj[~mask], 0.5)


def test_non_mean_field_policy_detected():
    g = fixture("crowd3_global")
    table = np.full((8, 2), 0.5)
    # states (0,1,0) and (0,0,1) share (s^0, mu) but get different rows
    table[g.global_index((0, 1, 0))] = [0.9, 0.1]
    pol = StationaryPolicy(table, channel_tag(g))
    assert not is_mean_field_type(pol, 0, g)
    with pytest.raises(HypothesisError):
        is_mean_field_symmetric(pol, pol, g, (0, 1))


def test_symmetry_on_global_channel(crowd2, local9):
    joint = local9.joint((3, 3))
    assert is_mean_field_symmetric(joint[0], joint[1], crowd2, (0, 1))
    # identical raw tables are not symmetric when the player slot matters
    assert not is_mean_field_symmetric(joint[0], joint[0], crowd2, (0, 1))
    with pytest.raises(ConfigError):
        is_mean_field_symmetric(joint[0], joint[1])


def test_symmetry_on_mean_field_channel():
    g = fixture("crowd2_mean_field")
    q = build_quantization(g, kernel_space="local")
    assert is_mean_field_symmetric(q.policy(2), q.policy(2))
    assert not is_mean_field_symmetric(q.policy(2), q.policy(3))


def test_channel_tag():
    g = fixture("crowd3_compressed")
    assert channel_tag(g) == "compressed[4]"
    assert channel_tag(g, ObservationChannel.mean_field()) == "mean_field[8]"


# -- distances, softness and lifting against direct definitions --------------

def test_distance_identity_and_single_disagreement():
    a = StationaryPolicy.deterministic([0, 1, 1], 2)
    b = StationaryPolicy.deterministic([0, 0, 1], 2)
    assert policy_distance(a, a) == 0.0
    assert policy_distance(a, b) == 1.0


def test_distances_against_brute_loops():
    rng = np.random.default_rng(4)
    for _ in range(10):
        p = StationaryPolicy(rng.dirichlet(np.ones(3), size=5))
        q = StationaryPolicy(rng.dirichlet(np.ones(3), size=5))
        brute = 0.0
        for y in range(5):
            for a in range(3):
                brute = max(brute, abs(p.kernel[y, a] - q.kernel[y, a]))
        assert policy_distance(p, q) == brute
        jp = JointPolicy([p, q])
        jq = JointPolicy([q, p])
        brute_joint = 0.0
        for i in range(2):
            for y in range(5):
                for a in range(3):
                    brute_joint = max(brute_joint, abs(jp[i].kernel[y, a] - jq[i].kernel[y, a]))
        assert joint_distance(jp, jq) == brute_joint
    assert joint_distance(jp, jp) == 0.0


def test_joint_distance_single_coordinate():
    base = StationaryPolicy(np.array([[0.5, 0.5]]))
    moved = StationaryPolicy(np.array([[0.5 + 0.125, 0.5 - 0.125]]))
    assert joint_distance(JointPolicy([base, base]), JointPolicy([moved, base])) == 0.125


def test_softness_above_one_over_actions_is_impossible():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = StationaryPolicy(rng.dirichlet(np.ones(3), size=4))
        assert not is_soft(p, 1 / 3 + 1e-9)


def test_lift_constant_kernel_gives_constant_policy(crowd2):
    k = np.tile([0.3, 0.7], (6, 1))
    assert np.allclose(lift_mean_field_policy(k, 0, crowd2).kernel, [0.3, 0.7])


def test_single_player_lift_is_a_bijection():
    from mfglab.fixtures import crowd_game

    g = crowd_game(1)
    rng = np.random.default_rng(1)
    k = rng.dirichlet(np.ones(2), size=4)
    pol = lift_mean_field_policy(k, 0, g)
    # each global state maps to its own (x, Dirac at x) row
    assert len({tuple(r) for r in pol.kernel}) == 2
    mask = reachable_mean_field_rows(g)
    assert np.allclose(project_mean_field_policy(pol, 0, g)[mask], k[mask])


def test_lifted_copies_of_one_kernel_are_symmetric(crowd2):
    rng = np.random.default_rng(2)
    k = rng.dirichlet(np.ones(2), size=6)
    p0 = lift_mean_field_policy(k, 0, crowd2)
    p1 = lift_mean_field_policy(k, 1, crowd2)
    assert is_mean_field_symmetric(p0, p1, crowd2, (0, 1))


def test_perturbing_one_global_state_breaks_mean_field_type():
    g = fixture("crowd3_global")
    k = np.random.default_rng(3).dirichlet(np.ones(2), size=8)
    table = lift_mean_field_policy(k, 0, g).kernel.copy()
    table[g.global_index((0, 1, 0))] = [0.99, 0.01]
    bad = StationaryPolicy(table, channel_tag(g))
    with pytest.raises(HypothesisError):
        project_mean_field_policy(bad, 0, g)


# -- quantization vectors -----------------------------------------------------

def test_resolution_one_keeps_the_softened_vertices():
    g = fixture("crowd2_local")
    q = build_quantization(g, resolution=1, softness_floor=0.1, kernel_space="observation", restrict_to=[0])
    assert len(q) == 2
    assert np.allclose(q.members[:, 0], [[0.9, 0.1], [0.1, 0.9]])


def test_single_observation_three_grid_points():
    from mfglab.fixtures import crowd_game

    g = crowd_game(1, "local")
    q = build_quantization(g, resolution=2, softness_floor=0.0, kernel_space="observation", restrict_to=[0])
    assert np.allclose(q.members[:, 0], [[1, 0], [0.5, 0.5], [0, 1]])


def test_covering_radius_on_random_policies(crowd2):
    q = build_quantization(crowd2, resolution=2, softness_floor=0.05, kernel_space="observation")
    rng = np.random.default_rng(5)
    for _ in range(100):
        target = StationaryPolicy(rng.dirichlet(np.ones(2), size=4), q.tag)
        _, d = q.nearest_member(target)
        assert d <= q.covering_radius
