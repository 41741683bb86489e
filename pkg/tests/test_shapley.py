import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from _strategies import dividend_games
from markov_shapley import oracle
from markov_shapley.envs.fixtures import all_fixtures, fixture, random_convex_game, single_agent_chain
from markov_shapley.errors import CapacityError, InvalidCoalitionError
from markov_shapley.mcg import CoalitionMask, CoalitionValues, MarkovConvexGame, joint_value_iteration
from markov_shapley.shapley import (action_marginal_contribution, check_igm, check_markov_core,
                                    coalition_weight, coalition_weight_exact, exact_msq, find_dummies,
                                    marginal_contribution, mc_msq, sample_coalition, sample_stream,
                                    verify_fairness)


def g(name):
    return fixture(name).game


# ---------------------------------------------------------------- weights
def test_coalition_weights():
    assert coalition_weight_exact(3, 0) == Fraction(1, 3)
    assert coalition_weight_exact(3, 1) == Fraction(1, 6)
    # four subsets of the two other agents: sizes 0, 1, 1, 2
    assert sum(coalition_weight_exact(3, k) * math.comb(2, k) for k in range(3)) == 1


@given(st.integers(1, 10))
def test_weights_normalise(n):
    assert sum(coalition_weight_exact(n, k) * math.comb(n - 1, k) for k in range(n)) == 1


def test_weight_range_checked():
    with pytest.raises(ValueError):
        coalition_weight(3, 3)


# ---------------------------------------------------- marginal contributions
def test_g1_marginal_contributions():
    game = g("g1")
    assert marginal_contribution(game, 0, (), 0) == pytest.approx(1.0)
    assert marginal_contribution(game, 0, (1,), 0) == pytest.approx(2.0)


def test_dummy_marginal_contribution_zero():
    game = g("g_dummy")
    for c in ((), (1,)):
        assert marginal_contribution(game, 0, c, 0) == 0.0
        for a in range(2):
            assert action_marginal_contribution(game, 0, c, 0, a) == 0.0


def test_alone_equals_singleton_value():
    game = g("g4")
    cache = CoalitionValues(game)
    for i in range(2):
        assert np.allclose(marginal_contribution(game, i, (), cache=cache),
                           cache.value(CoalitionMask.from_members((i,), 2)))


def test_g1_action_marginal_contribution():
    game = g("g1")
    assert action_marginal_contribution(game, 0, (1,), 0, 1) == pytest.approx(2.0)
    assert action_marginal_contribution(game, 0, (1,), 0, 0) == pytest.approx(0.0)


def test_action_mc_at_greedy_equals_mc():
    game = g("g4")
    cache = CoalitionValues(game)
    for i in range(2):
        for c in ((), (1 - i,)):
            for s in range(2):
                amc = [action_marginal_contribution(game, i, c, s, a, cache) for a in range(2)]
                assert max(amc) == pytest.approx(marginal_contribution(game, i, c, s, cache), abs=1e-12)


def test_member_cannot_join_again():
    with pytest.raises(InvalidCoalitionError):
        marginal_contribution(g("g1"), 0, (0,), 0)
    with pytest.raises(InvalidCoalitionError):
        marginal_contribution(g("g1"), 2, (), 0)


# ---------------------------------------------------------------- exact MSV
def test_g1_msv():
    msv = exact_msq(g("g1"))
    assert msv.v[:, 0] == pytest.approx([1.5, 2.5], abs=1e-12)
    assert msv.v[:, 0].sum() == pytest.approx(4.0)


def test_g1_msv_matches_permutation_oracle():
    assert oracle.perm_shapley(g("g1"), 0) == pytest.approx([1.5, 2.5], abs=1e-12)


def test_dummy_msv():
    assert exact_msq(g("g_dummy")).v[:, 0] == pytest.approx([0.0, 3.0], abs=1e-12)


def test_symmetric_msv():
    v = exact_msq(g("g_sym")).v
    assert abs(v[0, 0] - v[1, 0]) <= 1e-12


@pytest.mark.parametrize("fx", all_fixtures(), ids=lambda f: f.name)
def test_exact_matches_perm_oracle(fx):
    assert np.max(np.abs(exact_msq(fx.game).v - oracle.perm_shapley(fx.game))) <= 1e-9


def test_single_agent_msv_is_value():
    game = single_agent_chain((0.0, 1.0), 0.9)
    assert exact_msq(game).v[0, 0] == pytest.approx(10.0, abs=1e-8)


def test_capacity_limit():
    with pytest.raises(CapacityError):
        exact_msq(g("g_majority"), max_agents=2)


@given(dividend_games())
def test_efficiency_of_msv(game):
    """Per-state MSVs sum to V(N) - V(empty) on any game."""
    cache = CoalitionValues(game)
    n = game.n_agents
    grand = cache.value(CoalitionMask.grand(n)) - cache.value(CoalitionMask.empty(n))
    assert np.max(np.abs(exact_msq(game, cache).v.sum(axis=0) - grand)) <= 1e-9


@given(dividend_games(), st.randoms(use_true_random=False))
def test_single_permutation_telescopes(game, rnd):
    cache = CoalitionValues(game)
    n = game.n_agents
    order = list(range(n))
    rnd.shuffle(order)
    total = np.zeros(game.n_states)
    before = ()
    for i in order:
        total = total + marginal_contribution(game, i, before, cache=cache)
        before = before + (i,)
    grand = cache.value(CoalitionMask.grand(n)) - cache.value(CoalitionMask.empty(n))
    assert np.max(np.abs(total - grand)) <= n * 2 * cache.tol / (1 - game.gamma) + 1e-12


def test_monotone_marginal_contributions_on_supermodular():
    for fx in all_fixtures():
        if not fx.supermodular:
            continue
        game = fx.game
        n = game.n_agents
        cache = CoalitionValues(game)
        for i in range(n):
            others = [j for j in range(n) if j != i]
            for perm in itertools.permutations(others):
                prev = None
                for k in range(len(perm) + 1):
                    phi = marginal_contribution(game, i, perm[:k], cache=cache)
                    if prev is not None:
                        assert np.all(phi >= prev - 1e-9)
                    prev = phi


def test_reward_shift_leaves_marginal_contributions_unchanged():
    base = g("g1")
    shifted = MarkovConvexGame(base.actions_per_agent, base.transition, base.reward + 3.0, 0.0)
    a, b = CoalitionValues(base), CoalitionValues(shifted)
    for bits in range(4):
        c = CoalitionMask(bits, 2)
        assert b.value(c)[0] == pytest.approx(a.value(c)[0] + 3.0)
    assert np.allclose(exact_msq(base, a).v, exact_msq(shifted, b).v, atol=1e-12)


def test_positive_scaling_keeps_msq_argmax():
    base = g("g4")
    scaled = MarkovConvexGame(base.actions_per_agent, base.transition, base.reward * 2.5, base.gamma)
    assert np.array_equal(exact_msq(base).greedy(), exact_msq(scaled).greedy())


# ------------------------------------------------------------ Monte-Carlo
def test_sample_coalition_two_agents():
    counts = {0: 0, 1: 0}
    rng = np.random.default_rng(0)
    for _ in range(4000):
        counts[sample_coalition(0, 2, rng).size] += 1
    assert abs(counts[0] / 4000 - 0.5) < 0.05


def test_sample_coalition_single_agent_is_empty():
    rng = np.random.default_rng(0)
    assert all(sample_coalition(0, 1, rng).size == 0 for _ in range(10))


def test_sample_coalition_size_chi_square():
    """Sizes 0, 1, 2 of agent 0's predecessors are uniform for n = 3."""
    rng = np.random.default_rng(2024)
    n_draws = 100_000
    counts = np.zeros(3)
    for _ in range(n_draws):
        counts[sample_coalition(0, 3, rng).size] += 1
    expected = [coalition_weight(3, k) * math.comb(2, k) * n_draws for k in range(3)]
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_sample_coalition_subset_chi_square():
    """Each of the four subsets appears with its Shapley weight."""
    rng = np.random.default_rng(7)
    n_draws = 100_000
    counts = {}
    for _ in range(n_draws):
        b = sample_coalition(1, 3, rng).bits
        counts[b] = counts.get(b, 0) + 1
    keys = sorted(counts)
    assert keys == [0b000, 0b001, 0b100, 0b101]
    expected = [coalition_weight(3, bin(b).count("1")) * n_draws for b in keys]
    assert stats.chisquare([counts[b] for b in keys], expected).pvalue > 0.01


def test_mc_exhaustive_equals_exact():
    for fx in all_fixtures():
        game = fx.game
        msv = exact_msq(game)
        for i in range(game.n_agents):
            for s in range(game.n_states):
                assert abs(mc_msq(game, i, s, exhaustive=True) - msv.v[i, s]) <= 1e-12
                for a in range(game.actions_per_agent[i]):
                    assert abs(mc_msq(game, i, s, a, exhaustive=True) - msv.q[i][s, a]) <= 1e-12


def test_mc_g1_large_sample():
    game = g("g1")
    cache = CoalitionValues(game)
    hits = [abs(mc_msq(game, 0, 0, M=100_000, seed=seed, cache=cache) - 1.5) <= 0.01 for seed in range(5)]
    assert sum(hits) >= 5 * 0.95


def test_mc_dummy_exactly_zero():
    game = g("g_dummy")
    for M in (1, 10, 500):
        assert mc_msq(game, 0, 0, M=M, seed=M) == 0.0


def test_mc_requires_samples():
    with pytest.raises(ValueError):
        mc_msq(g("g1"), 0, 0, M=0)


def test_mc_seed_determinism_and_streams():
    game = g("g_majority")
    assert mc_msq(game, 0, 0, M=50, seed=3) == mc_msq(game, 0, 0, M=50, seed=3)
    a = sample_stream(5, 0).random()
    b = sample_stream(5, 1).random()
    assert a != b and sample_stream(5, 0).random() == a


# ----------------------------------------------------------------- core
def test_g1_core_slacks():
    game = g("g1")
    rep = check_markov_core(game, [1.5, 2.5])
    assert rep.slack[0b01][0] == pytest.approx(0.5)
    assert rep.slack[0b10][0] == pytest.approx(0.5)
    assert rep.slack[0b11][0] == pytest.approx(0.0, abs=1e-12)
    assert rep.in_core


def test_majority_not_in_core():
    game = g("g_majority")
    rep = check_markov_core(game, exact_msq(game).v)
    assert not rep.in_core
    assert rep.min_slack == pytest.approx(-1 / 3, abs=1e-9)
    worst, _ = rep.worst()
    assert worst.size == 2


def test_dummy_whole_value_to_worker_in_core():
    game = g("g_dummy")
    assert check_markov_core(game, [0.0, 3.0]).in_core
    assert not check_markov_core(game, [3.0, 0.0]).in_core


@pytest.mark.parametrize("fx", all_fixtures(), ids=lambda f: f.name)
def test_core_agrees_with_enumeration(fx):
    x = exact_msq(fx.game).v
    rep = check_markov_core(fx.game, x)
    twin = oracle.enumerate_core(fx.game, x)
    assert rep.in_core == twin.in_core
    assert rep.min_slack == pytest.approx(twin.min_slack, abs=1e-9)


def test_supermodular_random_games_in_core():
    for seed in range(5):
        game = random_convex_game(seed)
        assert check_markov_core(game, exact_msq(game).v).min_slack >= -1e-8


def test_core_payoff_shape_checked():
    with pytest.raises(ValueError):
        check_markov_core(g("g1"), [1.0, 2.0, 3.0])


# ------------------------------------------------------------- fairness
def test_fairness_g1():
    game = g("g1")
    assert verify_fairness(game, exact_msq(game)).passed


def test_fairness_dummy_flags_agent0():
    game = g("g_dummy")
    rep = verify_fairness(game, exact_msq(game))
    assert rep.dummy_agents == (0,) and rep.dummy and rep.passed
    assert find_dummies(game) == (0,)


def test_fairness_symmetry():
    fx = fixture("g_sym")
    rep = verify_fairness(fx.game, exact_msq(fx.game), symmetry=fx.symmetry)
    assert rep.symmetry and rep.symmetry_gap <= 1e-12


def test_fairness_detects_asymmetry():
    game = g("g1")
    rep = verify_fairness(game, exact_msq(game), symmetry=(1, 0))
    assert not rep.symmetry


# ------------------------------------------------------------------ IGM
def test_igm_g1():
    game = g("g1")
    q_star = joint_value_iteration(game).q
    assert check_igm(q_star, exact_msq(game).q, game.actions_per_agent).all()


def test_igm_zero_tables_fail_when_optimum_not_null():
    game = g("g1")
    q_star = joint_value_iteration(game).q
    zeros = [np.zeros((1, 2)), np.zeros((1, 2))]
    assert not check_igm(q_star, zeros, game.actions_per_agent).any()


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_igm_single_agent_always_true(row):
    q = np.array([row])
    assert check_igm(q, [q], (3,)).all()
