"""Small partially observable games with hand-checkable structure."""
from __future__ import annotations

import numpy as np

from ..mcg import MarkovConvexGame
from ..pomcg import Pomcg

GRAND, SINGLETONS = 0, 1


def _guess_game_rewards():
    """Actions per agent: 0 idle, 1 guess state 0, 2 guess state 1.

    Correct guesses pay 1 (agent 0) and 2 (agent 1), plus 1 when both are
    correct: the G1 dividends conditioned on the hidden state.
    """
    R = np.zeros((2, 9))
    for s in range(2):
        for idx in range(9):
            a0, a1 = idx % 3, idx // 3
            hit0, hit1 = a0 == s + 1, a1 == s + 1
            R[s, idx] = 1.0 * hit0 + 2.0 * hit1 + 1.0 * (hit0 and hit1)
    return R


def _accuracy_kernel(accuracy):
    """Joint observation o in {0, 1} reports the next state with ``accuracy``."""
    O = np.empty((9, 2, 2))
    for s2 in range(2):
        O[:, s2, s2] = accuracy
        O[:, s2, 1 - s2] = 1 - accuracy
    return O


def noisy_two_state(iid=False, stay=0.8, stationary=(0.6, 0.4), gamma=0.9,
                    accuracy=(0.85, 0.7)):
    """Two hidden states, two agents guessing them, two joint observations.

    Agent 0 receives a binary signal of the next state, agent 1 none. The
    signal is more accurate under the grand-coalition tag than under the
    singleton tag. With ``iid`` the state is redrawn from ``stationary``
    every step, which keeps the reachable belief set finite.
    """
    P = np.empty((2, 9, 2))
    for s in range(2):
        if iid:
            P[s, :] = stationary
        else:
            P[s, :, s] = stay
            P[s, :, 1 - s] = 1 - stay
    game = MarkovConvexGame((3, 3), P, _guess_game_rewards(), gamma=gamma,
                            name="noisy_iid" if iid else "noisy_two_state")
    O = np.stack([_accuracy_kernel(accuracy[0]), _accuracy_kernel(accuracy[1])])
    tags = (((0, 1),), ((0,), (1,)))
    return Pomcg(game, (2, 1), O, np.array([0.5, 0.5]), tags, game.name)


def fully_observable(game, start_state=0):
    """Agent 0 observes the state exactly; other agents observe nothing."""
    S = game.n_states
    O = np.zeros((game.n_joint, S, S))
    for s2 in range(S):
        O[:, s2, s2] = 1.0
    b0 = np.zeros(S)
    b0[start_state] = 1.0
    obs = (S,) + (1,) * (game.n_agents - 1)
    return Pomcg(game, obs, O[None], b0, None, f"{game.name}_observed")


def corner_beliefs(pomcg):
    from ..pomcg import BeliefState
    return [BeliefState(row) for row in np.eye(pomcg.n_states)]


def single_agent_tiger(accuracy=0.85, gamma=0.9):
    """Listen (null) or open one of two doors; opening resets the state.

    Rewards: listen -1, correct door +10, wrong door -100 (shift 100 keeps
    the shifted rewards nonnegative). Listening reports the state with
    ``accuracy``; opening gives an uninformative signal.
    """
    R = np.array([[-1.0, 10.0, -100.0], [-1.0, -100.0, 10.0]])
    P = np.zeros((2, 3, 2))
    for s in range(2):
        P[s, 0, s] = 1.0
        P[s, 1:, :] = 0.5
    O = np.zeros((3, 2, 2))
    for s2 in range(2):
        O[0, s2, s2] = accuracy
        O[0, s2, 1 - s2] = 1 - accuracy
    O[1:, :, :] = 0.5
    game = MarkovConvexGame((3,), P, R, gamma=gamma, reward_shift=100.0, name="tiger")
    return Pomcg(game, (2,), O[None], np.array([0.5, 0.5]), None, "tiger")
