"""Small hand-built cooperative games with known coalition values.

Every fixture uses action 0 as the null ("idle") action and action 1 as
"work" unless stated otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mcg import MarkovConvexGame, check_convexity


@dataclass(frozen=True, eq=False)
class Fixture:
    name: str
    game: MarkovConvexGame
    description: str
    symmetry: tuple = None      # agent permutation under which roles are identical
    dummies: tuple = ()         # agents whose actions never matter
    supermodular: bool = True


def _static_game(reward_by_joint, actions, name):
    R = np.array([reward_by_joint], dtype=float)
    P = np.ones((1, R.shape[1], 1))
    return MarkovConvexGame(tuple(actions), P, R, gamma=0.0, name=name)


def _joint_rewards(actions, fn):
    game_shape = tuple(actions)
    n_joint = int(np.prod(game_shape))
    out = []
    for idx in range(n_joint):
        acts, rest = [], idx
        for k in game_shape:
            acts.append(rest % k)
            rest //= k
        out.append(fn(acts))
    return out


def g1():
    """Two agents; reward 1*[a0 works] + 2*[a1 works] + 1*[both work]."""
    rewards = _joint_rewards((2, 2), lambda a: a[0] + 2 * a[1] + a[0] * a[1])
    return Fixture("g1", _static_game(rewards, (2, 2), "g1"),
                   "convex two-agent game, coalition values 0, 1, 2, 4")


def g_dummy():
    """Reward 3 when agent 1 works; agent 0 is a dummy."""
    rewards = _joint_rewards((2, 2), lambda a: 3 * a[1])
    return Fixture("g_dummy", _static_game(rewards, (2, 2), "g_dummy"),
                   "agent 0 never affects reward or dynamics", dummies=(0,))


def g_sym():
    """Two interchangeable agents: 1 each for working, 2 extra for both."""
    rewards = _joint_rewards((2, 2), lambda a: a[0] + a[1] + 2 * a[0] * a[1])
    return Fixture("g_sym", _static_game(rewards, (2, 2), "g_sym"),
                   "agents 0 and 1 are symmetric", symmetry=(1, 0))


def g_majority():
    """Three agents; reward 1 when at least two of them work."""
    rewards = _joint_rewards((2, 2, 2), lambda a: float(sum(a) >= 2))
    return Fixture("g_majority", _static_game(rewards, (2, 2, 2), "g_majority"),
                   "majority game: superadditive, not supermodular",
                   symmetry=(1, 2, 0), supermodular=False)


def g4():
    """Two-state chain with discount 0.9.

    Rewards follow nonnegative dividends over work indicators; working
    raises the chance of moving to (or staying in) the richer state 1.
    """
    dividends = {0: (1.0, 2.0, 1.0), 1: (2.0, 1.0, 3.0)}
    R = np.zeros((2, 4))
    P = np.zeros((2, 4, 2))
    for s in range(2):
        d0, d1, d01 = dividends[s]
        for idx in range(4):
            a0, a1 = idx % 2, idx // 2
            R[s, idx] = d0 * a0 + d1 * a1 + d01 * a0 * a1
            p_rich = 0.2 + 0.2 * a0 + 0.2 * a1 + 0.2 * a0 * a1 + 0.1 * s
            P[s, idx] = (1.0 - p_rich, p_rich)
    game = MarkovConvexGame((2, 2), P, R, gamma=0.9, name="g4")
    return Fixture("g4", game, "two-state chain, gamma 0.9")


FIXTURES = {
    "g1": g1,
    "g_dummy": g_dummy,
    "g_sym": g_sym,
    "g_majority": g_majority,
    "g4": g4,
}


def fixture(name):
    try:
        return FIXTURES[name]()
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None


def all_fixtures():
    return [make() for make in FIXTURES.values()]


def single_agent_chain(rewards=(0.0, 1.0), gamma=0.9):
    """One agent, one state, one action per reward entry."""
    R = np.array([rewards], dtype=float)
    P = np.ones((1, len(rewards), 1))
    return MarkovConvexGame((len(rewards),), P, R, gamma=gamma, name="single_agent")


def random_dividend_game(rng, n_agents, n_states, n_actions, gamma):
    """Random game with reward sum_T d_T(s) prod_{i in T} g_i(s, a_i).

    Dividends d_T and action strengths g_i are nonnegative, g_i(null) = 0,
    so null actions earn nothing. Transitions depend on the joint action.
    """
    acts = tuple(int(k) for k in n_actions)
    n_joint = int(np.prod(acts))
    strides = [int(np.prod(acts[:i])) for i in range(n_agents)]
    g = [rng.uniform(0.0, 1.0, size=(n_states, k)) for k in acts]
    for gi in g:
        gi[:, 0] = 0.0
    R = np.zeros((n_states, n_joint))
    for bits in range(1, 1 << n_agents):
        members = [i for i in range(n_agents) if bits >> i & 1]
        # larger teams get larger dividends on average, favouring convexity
        d = rng.uniform(0.0, 1.0, size=n_states) * len(members)
        for idx in range(n_joint):
            prod = np.ones(n_states)
            for i in members:
                prod = prod * g[i][:, (idx // strides[i]) % acts[i]]
            R[:, idx] += d * prod
    base = rng.dirichlet(np.ones(n_states), size=n_states)
    push = rng.dirichlet(np.ones(n_states), size=(n_states, n_joint))
    mix = rng.uniform(0.0, 0.5, size=(n_states, n_joint, 1))
    P = (1 - mix) * base[:, None, :] + mix * push
    P = P / P.sum(axis=2, keepdims=True)
    return MarkovConvexGame(acts, P, R, gamma=gamma, name="random_dividend")


def random_convex_game(seed, max_agents=4, max_states=5, max_actions=3, max_tries=200):
    """Seeded random game that passes the supermodular convexity check."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        n = int(rng.integers(2, max_agents + 1))
        S = int(rng.integers(1, max_states + 1))
        acts = tuple(int(k) for k in rng.integers(2, max_actions + 1, size=n))
        gamma = float(rng.choice([0.0, 0.5, 0.9]))
        game = random_dividend_game(rng, n, S, acts, gamma)
        if check_convexity(game, "supermodular", tol=1e-9).passed:
            return game
    raise RuntimeError(f"no convex game found in {max_tries} tries for seed {seed}")
