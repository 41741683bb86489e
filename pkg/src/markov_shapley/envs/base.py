"""Environment interface for the tabular learners and a wrapper for games."""
from __future__ import annotations

import numpy as np


class TabularEnv:
    """Global-reward cooperative environment over a finite state index.

    Subclasses set ``n_states``, ``actions_per_agent`` and ``gamma`` and
    implement ``reset(rng) -> state`` and
    ``step(actions, rng) -> (next_state, reward, terminal, truncated)``.
    """

    n_states: int
    actions_per_agent: tuple
    gamma: float

    @property
    def n_agents(self):
        return len(self.actions_per_agent)

    def reset(self, rng):
        raise NotImplementedError

    def step(self, actions, rng):
        raise NotImplementedError


class GameEnv(TabularEnv):
    """Samples trajectories of a ``MarkovConvexGame``.

    Episodes last ``horizon`` steps. With ``terminal_at_horizon`` the last
    step is a true terminal (no bootstrap), which turns a static game into
    a one-shot episodic task; otherwise the episode is truncated.
    """

    def __init__(self, game, horizon=1, start_dist=None, terminal_at_horizon=True):
        self.game = game
        self.n_states = game.n_states
        self.actions_per_agent = game.actions_per_agent
        self.gamma = game.gamma
        self.horizon = int(horizon)
        self.terminal_at_horizon = terminal_at_horizon
        if start_dist is None:
            start_dist = np.full(game.n_states, 1.0 / game.n_states)
        self.start_dist = np.asarray(start_dist, dtype=float)
        self._cdf = np.cumsum(game.transition, axis=2)
        self._state = None
        self._t = 0

    def reset(self, rng):
        self._t = 0
        self._state = int(rng.choice(self.n_states, p=self.start_dist)) if self.n_states > 1 else 0
        return self._state

    def step(self, actions, rng):
        a = self.game.joint_index(actions)
        s = self._state
        reward = float(self.game.reward[s, a])
        cdf = self._cdf[s, a]
        nxt = int(min(np.searchsorted(cdf, rng.random(), side="right"), self.n_states - 1))
        self._t += 1
        self._state = nxt
        done = self._t >= self.horizon
        terminal = done and self.terminal_at_horizon
        return nxt, reward, terminal, done and not terminal
