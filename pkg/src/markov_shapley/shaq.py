"""Tabular Shapley Q-learning (SHAQ) and its additive (VDN) special case.

Each agent keeps a table q_i(s, a_i) and, in ``shaq`` mode, a table of
coefficients alpha_i(s, a_i) in [1, alpha_max]. The coefficient of an
action is delta = 1 when it is the agent's greedy action and alpha
otherwise. With y = R + gamma * sum_j max q_j(s') the TD error is

    Delta = y - sum_i delta_i * q_i(s, a_i).

Updates (lr is a per-entry Robbins-Monro rate):

* ``shaq``: q_i(s, a_i) += lr * (y / (n * delta_i) - q_i(s, a_i)), the
  stochastic approximation of the Shapley-Bellman operator with weights
  w_i = 1 / (n * delta_i). Coefficients of non-greedy actions move by
  alpha += lr_alpha * Delta * q_i(s, a_i) and are clamped.
* ``vdn``: delta = 1 and q_i(s, a_i) += (lr / n) * Delta, the additive
  value-decomposition TD step.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ShaqConfig:
    mode: str = "shaq"
    gamma: float = 0.9
    lr_c: float = 0.5           # lr = lr_c / (1 + lr_d * visits)
    lr_d: float = 0.01
    lr_alpha: float = 0.1
    alpha_max: float = 10.0
    eps_start: float = 1.0
    eps_end: float = 0.05
    anneal_steps: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("shaq", "vdn"):
            raise ValueError(f"mode must be 'shaq' or 'vdn', got {self.mode!r}")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.lr_c <= 0 or self.lr_d < 0 or self.lr_alpha < 0:
            raise ValueError("learning-rate parameters must be nonnegative (lr_c positive)")
        if self.alpha_max < 1:
            raise ValueError("alpha_max must be >= 1")
        if self.mode == "vdn" and self.lr_alpha != 0:
            object.__setattr__(self, "lr_alpha", 0.0)


@dataclass(frozen=True)
class Transition:
    s: int
    actions: tuple
    reward: float
    s_next: int
    terminal: bool


@dataclass
class ShaqState:
    q: list
    alpha: list
    visits: list
    config: ShaqConfig
    t: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    @property
    def n_agents(self):
        return len(self.q)

    def copy(self):
        return copy.deepcopy(self)


def make_state(n_states, actions_per_agent, config=None, **overrides):
    """Zero-initialised learner state; keyword overrides patch ``config``."""
    config = config or ShaqConfig()
    if overrides:
        config = ShaqConfig(**{**config.__dict__, **overrides})
    q = [np.zeros((n_states, k)) for k in actions_per_agent]
    alpha = [np.ones((n_states, k)) for k in actions_per_agent]
    visits = [np.zeros((n_states, k), dtype=np.int64) for k in actions_per_agent]
    return ShaqState(q, alpha, visits, config, 0, np.random.default_rng(config.seed))


def learning_rate(config, visits):
    """c / (1 + d * visits)."""
    return config.lr_c / (1.0 + config.lr_d * visits)


def epsilon(config, t):
    """Linear annealing from eps_start to eps_end over anneal_steps."""
    if config.anneal_steps <= 0:
        return config.eps_end
    frac = min(1.0, t / config.anneal_steps)
    return config.eps_start + (config.eps_end - config.eps_start) * frac


def delta_coefficient(state, s, agent, action):
    """1 for the agent's greedy action (lowest-index ties), else alpha."""
    if state.config.mode == "vdn":
        return 1.0
    qi = state.q[agent][s]
    if action == int(np.argmax(qi)):
        return 1.0
    return float(state.alpha[agent][s, action])


def _target(state, tr):
    if tr.terminal:
        return float(tr.reward)
    boot = 0.0
    for qi in state.q:
        boot += float(np.max(qi[tr.s_next]))
    return float(tr.reward) + state.config.gamma * boot


def shaq_td_error(state, tr):
    """Delta = R + gamma * sum_i max q_i(s') (1 - terminal) - sum_i delta_i q_i(s, a_i)."""
    pred = 0.0
    for i, a in enumerate(tr.actions):
        pred += delta_coefficient(state, tr.s, i, a) * float(state.q[i][tr.s, a])
    return _target(state, tr) - pred


def shaq_step(state, tr):
    """Apply one update for transition ``tr`` in place; returns (state, Delta)."""
    cfg = state.config
    n = state.n_agents
    y = _target(state, tr)
    greedy = [int(np.argmax(qi[tr.s])) for qi in state.q]
    deltas = [delta_coefficient(state, tr.s, i, a) for i, a in enumerate(tr.actions)]
    old = [float(state.q[i][tr.s, a]) for i, a in enumerate(tr.actions)]
    pred = 0.0
    for d, qv in zip(deltas, old):
        pred += d * qv
    td = y - pred
    for i, a in enumerate(tr.actions):
        lr = learning_rate(cfg, state.visits[i][tr.s, a])
        if cfg.mode == "vdn":
            state.q[i][tr.s, a] = old[i] + (lr / n) * td
        else:
            state.q[i][tr.s, a] = old[i] + lr * (y / (n * deltas[i]) - old[i])
        state.visits[i][tr.s, a] += 1
    if cfg.mode == "shaq" and cfg.lr_alpha > 0:
        for i, a in enumerate(tr.actions):
            if a != greedy[i]:
                new_alpha = state.alpha[i][tr.s, a] + cfg.lr_alpha * td * old[i]
                state.alpha[i][tr.s, a] = min(cfg.alpha_max, max(1.0, new_alpha))
    state.t += 1
    return state, td


def extract_policy(state):
    """Per-agent greedy action per state (S, n), lowest index on ties."""
    return np.stack([np.argmax(qi, axis=1) for qi in state.q], axis=1)


def select_actions(state, s, eps):
    """epsilon-greedy with an independent exploration draw per agent."""
    rng = state.rng
    actions = []
    for qi in state.q:
        if rng.random() < eps:
            actions.append(int(rng.integers(qi.shape[1])))
        else:
            actions.append(int(np.argmax(qi[s])))
    return tuple(actions)


@dataclass(frozen=True)
class EpisodeRecord:
    step: int
    episode: int
    ret: float
    epsilon: float
    probe_q: tuple


def curve_header(state):
    cols = ["step", "episode", "return", "epsilon"]
    for i, qi in enumerate(state.q):
        cols += [f"q{i}_a{a}" for a in range(qi.shape[1])]
    return cols


def train(env, state, steps, probe_state=0):
    """Run ``steps`` environment steps of epsilon-greedy SHAQ.

    Returns ``(state, records)`` with one record per finished episode.
    """
    records = []
    s = env.reset(state.rng)
    ret = 0.0
    episode = 0
    for _ in range(int(steps)):
        eps = epsilon(state.config, state.t)
        actions = select_actions(state, s, eps)
        s_next, r, terminal, truncated = env.step(actions, state.rng)
        shaq_step(state, Transition(s, actions, r, s_next, terminal))
        ret += r
        s = s_next
        if terminal or truncated:
            probe = tuple(float(x) for qi in state.q for x in qi[probe_state])
            records.append(EpisodeRecord(state.t, episode, ret, eps, probe))
            episode += 1
            ret = 0.0
            s = env.reset(state.rng)
    return state, records
