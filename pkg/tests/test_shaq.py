import numpy as np
import pytest
import sympy
from hypothesis import given
from hypothesis import strategies as st

from markov_shapley.envs.base import GameEnv
from markov_shapley.envs.fixtures import fixture
from markov_shapley.experiments import make_config, make_env, run_training
from markov_shapley.sbo import SboWeights, contraction_condition
from markov_shapley.shaq import (ShaqConfig, Transition, curve_header, delta_coefficient, epsilon,
                                 extract_policy, learning_rate, make_state, shaq_step, shaq_td_error,
                                 train)
from markov_shapley.verify import reference_vdn_step, vdn_bitwise_gap


def two_agent_state(mode="shaq", **kw):
    return make_state(1, (2, 2), ShaqConfig(mode=mode, gamma=0.9, **kw))


# ------------------------------------------------------------------ config
def test_config_validation():
    with pytest.raises(ValueError):
        ShaqConfig(mode="qmix")
    with pytest.raises(ValueError):
        ShaqConfig(alpha_max=0.5)
    with pytest.raises(ValueError):
        ShaqConfig(gamma=1.0)
    assert ShaqConfig(mode="vdn", lr_alpha=0.3).lr_alpha == 0.0


def test_epsilon_schedule():
    cfg = ShaqConfig(eps_start=1.0, eps_end=0.05, anneal_steps=100)
    assert epsilon(cfg, 0) == 1.0
    assert epsilon(cfg, 50) == pytest.approx(0.525)
    assert epsilon(cfg, 100) == pytest.approx(0.05)
    assert epsilon(cfg, 10_000) == pytest.approx(0.05)


def test_learning_rate_schedule():
    cfg = ShaqConfig(lr_c=0.5, lr_d=0.01)
    assert learning_rate(cfg, 0) == 0.5
    assert learning_rate(cfg, 100) == pytest.approx(0.25)


def test_robbins_monro_conditions():
    t = sympy.symbols("t", integer=True, nonnegative=True)
    c, d = sympy.Rational(1, 2), sympy.Rational(1, 100)
    lr = c / (1 + d * t)
    assert sympy.summation(lr, (t, 0, sympy.oo)) == sympy.oo
    assert sympy.summation(lr ** 2, (t, 0, sympy.oo)).is_finite
    # numeric partial sums agree with the symbolic verdicts
    cfg = ShaqConfig(lr_c=0.5, lr_d=0.01)
    rates = learning_rate(cfg, np.arange(10 ** 6))
    first, full = rates[:10 ** 4].sum(), rates.sum()
    assert full - first > 0.5 / 0.01 * np.log(100) * 0.9
    assert (rates ** 2).sum() <= 0.25 * (1 + 1 / 0.01)


# ------------------------------------------------------------------- delta
def test_delta_greedy_is_one():
    st_ = two_agent_state()
    st_.q[0][0] = [0.0, 1.0]
    st_.alpha[0][0] = [1.7, 1.3]
    assert delta_coefficient(st_, 0, 0, 1) == 1.0


def test_delta_suboptimal_is_alpha():
    st_ = two_agent_state()
    st_.q[0][0] = [0.0, 1.0]
    st_.alpha[0][0, 0] = 1.2
    assert delta_coefficient(st_, 0, 0, 0) == 1.2


def test_delta_vdn_is_one():
    st_ = two_agent_state("vdn")
    st_.q[0][0] = [0.0, 1.0]
    st_.alpha[0][0, 0] = 1.2
    assert delta_coefficient(st_, 0, 0, 0) == 1.0


def test_delta_tie_uses_lowest_index():
    st_ = two_agent_state()
    st_.alpha[0][0, 1] = 2.0
    assert delta_coefficient(st_, 0, 0, 0) == 1.0
    assert delta_coefficient(st_, 0, 0, 1) == 2.0


# ---------------------------------------------------------------- TD error
def test_td_error_terminal_greedy():
    st_ = two_agent_state()
    st_.q[0][0] = [0.0, 0.4]
    st_.q[1][0] = [0.0, 0.5]
    assert shaq_td_error(st_, Transition(0, (1, 1), 1.0, 0, True)) == pytest.approx(0.1)


def test_td_error_suboptimal_weighted():
    st_ = two_agent_state()
    st_.q[0][0] = [0.0, 0.4]
    st_.q[1][0] = [0.9, 0.5]
    st_.alpha[1][0, 1] = 1.2
    assert shaq_td_error(st_, Transition(0, (1, 1), 1.0, 0, True)) == pytest.approx(0.0, abs=1e-15)


def test_td_error_zero_at_fixed_point():
    st_ = two_agent_state()
    # gamma 0.9, reward 0.4, self-loop: y = 0.4 + 0.9 * 4 = 4 = sum of greedy q
    st_.q[0][0] = [0.0, 2.0]
    st_.q[1][0] = [0.0, 2.0]
    assert shaq_td_error(st_, Transition(0, (1, 1), 0.4, 0, False)) == pytest.approx(0.0, abs=1e-12)


# -------------------------------------------------------------------- step
@pytest.mark.parametrize("mode", ["shaq", "vdn"])
def test_worked_example_quarter_each(mode):
    st_ = two_agent_state(mode, lr_c=0.5)
    _, td = shaq_step(st_, Transition(0, (1, 1), 1.0, 0, True))
    assert td == 1.0
    assert st_.q[0][0, 1] == pytest.approx(0.25)
    assert st_.q[1][0, 1] == pytest.approx(0.25)
    assert st_.visits[0][0, 1] == 1


def test_zero_td_no_change_vdn():
    st_ = two_agent_state("vdn")
    st_.q[0][0] = [0.3, 0.4]
    st_.q[1][0] = [0.1, 0.6]
    before = [q.copy() for q in st_.q]
    _, td = shaq_step(st_, Transition(0, (1, 1), 1.0, 0, True))
    assert td == pytest.approx(0.0, abs=1e-15)
    assert all(np.array_equal(a, b) for a, b in zip(before, st_.q))


def test_zero_td_no_change_shaq_at_fixed_point():
    st_ = two_agent_state()
    st_.q[0][0] = [0.0, 2.0]
    st_.q[1][0] = [0.0, 2.0]
    before = [q.copy() for q in st_.q]
    _, td = shaq_step(st_, Transition(0, (1, 1), 0.4, 0, False))
    assert td == pytest.approx(0.0, abs=1e-12)
    assert all(np.allclose(a, b, atol=1e-12) for a, b in zip(before, st_.q))


def test_alpha_descends_on_squared_td_and_clamps():
    st_ = two_agent_state(lr_alpha=0.5, alpha_max=3.0)
    st_.q[0][0] = [2.0, 1.0]    # action 1 is sub-optimal for agent 0
    st_.q[1][0] = [0.0, 1.0]
    # y = 5, pred = 1 + 1 = 2, Delta = 3: alpha += 0.5 * 3 * 1 -> 2.5
    shaq_step(st_, Transition(0, (1, 1), 5.0, 0, True))
    assert st_.alpha[0][0, 1] == pytest.approx(2.5)
    assert st_.alpha[1][0, 1] == 1.0     # greedy entries are not updated
    shaq_step(st_, Transition(0, (1, 1), 50.0, 0, True))
    assert st_.alpha[0][0, 1] == 3.0
    st_.q[0][0] = [2.0, 1.0]
    shaq_step(st_, Transition(0, (1, 1), -50.0, 0, True))
    assert st_.alpha[0][0, 1] == 1.0


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.floats(-3, 3), st.booleans()),
                min_size=1, max_size=40))
def test_alpha_stays_in_bounds(steps):
    st_ = two_agent_state(lr_alpha=1.0, alpha_max=4.0)
    for a0, a1, r, term in steps:
        shaq_step(st_, Transition(0, (a0, a1), r, 0, term))
    for al in st_.alpha:
        assert np.all(al >= 1.0) and np.all(al <= 4.0)
    # implied weights 1/(n alpha) keep the contraction margin for any gamma < 1
    w = SboWeights.from_alpha([a.copy() for a in st_.alpha])
    assert contraction_condition(w, 0.999).ok


def test_vdn_matches_reference_step():
    assert vdn_bitwise_gap(seeds=3, steps=300) == 0.0


def test_reference_vdn_step_worked_example():
    q = [np.zeros((1, 2)), np.zeros((1, 2))]
    visits = [np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=int)]
    td = reference_vdn_step(q, visits, Transition(0, (1, 1), 1.0, 0, True), 0.9, 0.5, 0.01)
    assert td == 1.0 and q[0][0, 1] == 0.25


# ------------------------------------------------------------------ policy
def test_extract_policy_cases():
    st_ = make_state(3, (3,), ShaqConfig())
    st_.q[0][:] = [[0.0, 1.0, 0.5], [2.0, 2.0, 1.0], [-1.0, -3.0, -0.5]]
    assert extract_policy(st_)[:, 0].tolist() == [1, 0, 2]


def test_extract_policy_multi_agent_shape():
    st_ = make_state(2, (2, 3), ShaqConfig())
    st_.q[1][1, 2] = 1.0
    assert extract_policy(st_).tolist() == [[0, 0], [0, 2]]


# ---------------------------------------------------------------- training
def test_train_g1_learns_work_work_with_equal_credit():
    res = run_training("g1", "shaq", seed=0)
    assert res.summary["optimal"] and res.summary["policy"] == [[1, 1]]
    q = res.summary["greedy_q"][0]
    assert abs(q[0] - 2.0) <= 0.05 and abs(q[1] - 2.0) <= 0.05


def test_train_g1_vdn_sums_to_optimum():
    res = run_training("g1", "vdn", seed=1)
    assert res.summary["optimal"]
    assert sum(res.summary["greedy_q"][0]) == pytest.approx(4.0, abs=0.05)


def test_train_records_and_determinism():
    env = make_env("g1")
    runs = []
    for _ in range(2):
        state = make_state(env.n_states, env.actions_per_agent, make_config("g1", env, seed=4))
        _, records = train(env, state, 300)
        runs.append(records)
    assert runs[0] == runs[1]
    assert len(runs[0]) == 300                 # one-step episodes
    assert runs[0][0].epsilon == 1.0
    assert len(runs[0][0].probe_q) == 4


def test_train_zero_steps():
    env = make_env("g1")
    state = make_state(env.n_states, env.actions_per_agent, make_config("g1", env))
    _, records = train(env, state, 0)
    assert records == []
    assert curve_header(state) == ["step", "episode", "return", "epsilon", "q0_a0", "q0_a1", "q1_a0", "q1_a1"]


def test_multi_state_fixture_env_truncates():
    env = make_env("g4")
    assert isinstance(env, GameEnv) and not env.terminal_at_horizon
    rng = np.random.default_rng(0)
    env.reset(rng)
    flags = [env.step((0, 0), rng)[2:] for _ in range(env.horizon)]
    assert flags[-1] == (False, True) and all(f == (False, False) for f in flags[:-1])


def test_g4_training_reaches_optimal_policy():
    res = run_training("g4", "shaq", seed=0, steps=20_000)
    assert res.summary["optimal"]
