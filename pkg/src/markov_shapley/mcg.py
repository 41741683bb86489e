"""Markov convex games and exact dynamic-programming solvers.

A game has ``n_agents`` agents, each with a finite action set, a shared
finite state space, a dense transition kernel ``P[s, a, s']`` and a reward
table ``R[s, a]`` over joint actions. Joint actions are indexed row-major
with agent 0 varying fastest: ``a = sum_i a_i * prod_{j<i} |A_j|``.

Coalition values pin every non-member to its null action and solve the
remaining single-controller MDP by value iteration.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import argmax_lowest
from .errors import ConfigError, InvalidCoalitionError, NonConvergenceError

MAX_AGENTS = 16
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 100_000


@dataclass(frozen=True)
class CoalitionMask:
    """Bitset over agents ``0..n_agents-1``."""

    bits: int
    n_agents: int

    def __post_init__(self):
        if not 0 <= self.n_agents <= MAX_AGENTS:
            raise InvalidCoalitionError(f"n_agents must be in [0, {MAX_AGENTS}], got {self.n_agents}")
        if self.bits < 0 or self.bits >> self.n_agents:
            raise InvalidCoalitionError(
                f"coalition bits {self.bits:#b} reference agents outside 0..{self.n_agents - 1}")

    @classmethod
    def from_members(cls, members, n_agents):
        bits = 0
        for i in members:
            if not 0 <= i < n_agents:
                raise InvalidCoalitionError(f"agent {i} outside 0..{n_agents - 1}")
            bits |= 1 << i
        return cls(bits, n_agents)

    @classmethod
    def empty(cls, n_agents):
        return cls(0, n_agents)

    @classmethod
    def grand(cls, n_agents):
        return cls((1 << n_agents) - 1, n_agents)

    @property
    def members(self):
        return tuple(i for i in range(self.n_agents) if self.bits >> i & 1)

    @property
    def size(self):
        return bin(self.bits).count("1")

    def __contains__(self, agent):
        return 0 <= agent < self.n_agents and bool(self.bits >> agent & 1)

    def __iter__(self):
        return iter(self.members)

    def __len__(self):
        return self.size

    def with_agent(self, agent):
        return CoalitionMask.from_members(self.members + (agent,), self.n_agents)

    def without(self, agent):
        return CoalitionMask(self.bits & ~(1 << agent), self.n_agents)

    def union(self, other):
        return CoalitionMask(self.bits | other.bits, self.n_agents)

    def intersection(self, other):
        return CoalitionMask(self.bits & other.bits, self.n_agents)

    def isdisjoint(self, other):
        return not self.bits & other.bits

    def __str__(self):
        return "{" + ",".join(str(i) for i in self.members) + "}"


def all_coalitions(n_agents):
    """Every coalition of ``n_agents`` agents, ordered by bit pattern."""
    return [CoalitionMask(b, n_agents) for b in range(1 << n_agents)]


def subsets_excluding(agent, n_agents):
    """Every coalition of ``N \\ {agent}``."""
    full = ((1 << n_agents) - 1) & ~(1 << agent)
    out = []
    sub = full
    while True:
        out.append(CoalitionMask(sub, n_agents))
        if sub == 0:
            break
        sub = (sub - 1) & full
    return sorted(out, key=lambda c: c.bits)


@dataclass(frozen=True, eq=False)
class MarkovConvexGame:
    """Finite cooperative Markov game with a coalition-aware reward.

    ``transition`` has shape (S, A, S) and ``reward`` shape (S, A) with
    A the number of joint actions.
    """

    actions_per_agent: tuple
    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    null_action: tuple = None
    reward_shift: float = 0.0
    name: str = ""

    def __post_init__(self):
        acts = tuple(int(a) for a in self.actions_per_agent)
        if not 1 <= len(acts) <= MAX_AGENTS:
            raise ConfigError(f"n_agents must be in [1, {MAX_AGENTS}], got {len(acts)}")
        if any(a < 1 for a in acts):
            raise ConfigError("every agent needs at least one action")
        object.__setattr__(self, "actions_per_agent", acts)
        null = (0,) * len(acts) if self.null_action is None else tuple(int(x) for x in self.null_action)
        if len(null) != len(acts) or any(not 0 <= x < a for x, a in zip(null, acts)):
            raise ConfigError(f"null_action {null} invalid for action counts {acts}")
        object.__setattr__(self, "null_action", null)

        n_joint = int(np.prod(acts))
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[1] != n_joint or P.shape[0] != P.shape[2]:
            raise ConfigError(f"transition must have shape (S, {n_joint}, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ConfigError(f"reward must have shape {P.shape[:2]}, got {R.shape}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(R))):
            raise ConfigError("transition and reward must be finite")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ConfigError("transition rows must be nonnegative and sum to 1 within 1e-12")
        gamma = float(self.gamma)
        if not 0.0 <= gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {gamma}")
        shift = float(self.reward_shift)
        if shift < 0:
            raise ConfigError("reward_shift must be nonnegative")
        if R.min() + shift < -1e-12:
            raise ConfigError(
                f"min reward {R.min():g} plus reward_shift {shift:g} is negative; raise reward_shift")
        P.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "reward_shift", shift)

    @property
    def n_agents(self):
        return len(self.actions_per_agent)

    @property
    def n_states(self):
        return self.reward.shape[0]

    @property
    def n_joint(self):
        return self.reward.shape[1]

    @property
    def strides(self):
        return tuple(int(np.prod(self.actions_per_agent[:i])) for i in range(self.n_agents))

    def joint_index(self, actions):
        if len(actions) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(actions)}")
        for a, k in zip(actions, self.actions_per_agent):
            if not 0 <= a < k:
                raise ValueError(f"action {a} out of range for an agent with {k} actions")
        return int(sum(int(a) * st for a, st in zip(actions, self.strides)))

    def joint_actions(self, index):
        return tuple((index // st) % k for st, k in zip(self.strides, self.actions_per_agent))

    def joint_action_table(self):
        """Array (A, n) with the per-agent actions of every joint index."""
        idx = np.arange(self.n_joint)
        return np.stack([(idx // st) % k for st, k in zip(self.strides, self.actions_per_agent)], axis=1)

    def shifted(self):
        """Copy with ``reward_shift`` folded into the reward table."""
        if self.reward_shift == 0.0:
            return self
        return MarkovConvexGame(self.actions_per_agent, self.transition, self.reward + self.reward_shift,
                                self.gamma, self.null_action, 0.0, self.name)

    def with_gamma(self, gamma):
        return MarkovConvexGame(self.actions_per_agent, self.transition, self.reward, gamma,
                                self.null_action, self.reward_shift, self.name)


@dataclass(frozen=True, eq=False)
class CoalitionSubgame:
    """Single-controller MDP in which only coalition members choose actions.

    Coalition actions are indexed row-major over members (lowest member
    fastest); ``joint_index[k]`` is the full joint action used for
    coalition action ``k`` with non-members at their null action.
    """

    game: MarkovConvexGame
    coalition: CoalitionMask
    member_actions: np.ndarray
    joint_index: np.ndarray
    transition: np.ndarray
    reward: np.ndarray

    @property
    def gamma(self):
        return self.game.gamma

    @property
    def members(self):
        return self.coalition.members

    @property
    def n_actions(self):
        return len(self.joint_index)

    def action_of(self, agent):
        """Array giving ``agent``'s action in each coalition action."""
        pos = self.members.index(agent)
        return self.member_actions[:, pos]


def _check_coalition(game, coalition):
    if isinstance(coalition, (int, np.integer)):
        coalition = CoalitionMask(int(coalition), game.n_agents)
    if coalition.n_agents != game.n_agents:
        raise InvalidCoalitionError(
            f"coalition built for {coalition.n_agents} agents, game has {game.n_agents}")
    return coalition


def build_coalition_subgame(game, coalition):
    """Restrict ``game`` to ``coalition``; non-members are pinned to null."""
    coalition = _check_coalition(game, coalition)
    members = coalition.members
    sizes = [game.actions_per_agent[i] for i in members]
    combos = list(itertools.product(*[range(k) for k in reversed(sizes)]))
    member_actions = np.array([c[::-1] for c in combos], dtype=int).reshape(len(combos), len(members))
    base = list(game.null_action)
    joint = np.empty(len(combos), dtype=int)
    for k, acts in enumerate(member_actions):
        full = list(base)
        for i, a in zip(members, acts):
            full[i] = int(a)
        joint[k] = game.joint_index(full)
    P = game.transition[:, joint, :]
    R = game.reward[:, joint]
    return CoalitionSubgame(game, coalition, member_actions, joint, P, R)


@dataclass(frozen=True, eq=False)
class CoalitionValueTable:
    """Optimal state values ``v`` and Q-values ``q`` (S, A_C) of a coalition."""

    coalition: CoalitionMask
    v: np.ndarray
    q: np.ndarray
    solve_tol: float
    iterations: int
    residuals: tuple = field(default=(), repr=False)

    def greedy(self):
        return argmax_lowest(self.q)


def _value_iteration(P, R, gamma, tol, max_iters, q0=None):
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros_like(R) if q0 is None else np.array(q0, dtype=float)
    # stop on change <= tol*(1-gamma) so the result is within gamma*tol of the fixed point
    stop = tol * (1.0 - gamma)
    residuals = []
    for it in range(1, max_iters + 1):
        q_new = R + gamma * (P @ q.max(axis=1))
        res = float(np.max(np.abs(q_new - q)))
        residuals.append(res)
        q = q_new
        if res <= stop:
            return q, it, tuple(residuals)
    raise NonConvergenceError("value iteration did not converge", residuals[-1], max_iters)


def optimal_coalition_value(game, coalition, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS):
    """Optimal values of ``coalition`` with non-members at null actions."""
    sub = build_coalition_subgame(game, coalition)
    q, iters, residuals = _value_iteration(sub.transition, sub.reward, game.gamma, tol, max_iters)
    return CoalitionValueTable(sub.coalition, q.max(axis=1), q, tol, iters, residuals)


def joint_value_iteration(game, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS):
    """Optimal values of the grand coalition by Q value iteration."""
    return optimal_coalition_value(game, CoalitionMask.grand(game.n_agents), tol, max_iters)


def _policy_joint_indices(game, policy):
    policy = np.asarray(policy, dtype=int)
    if policy.shape != (game.n_states, game.n_agents):
        raise ValueError(f"policy must have shape ({game.n_states}, {game.n_agents}), got {policy.shape}")
    return np.array([game.joint_index(row) for row in policy], dtype=int)


def policy_evaluation(game, policy, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS):
    """Value of a deterministic joint policy given as an (S, n) action array."""
    joint = _policy_joint_indices(game, policy)
    states = np.arange(game.n_states)
    P = game.transition[states, joint, :]
    r = game.reward[states, joint]
    v = np.zeros(game.n_states)
    stop = tol * (1.0 - game.gamma)
    res = np.inf
    for it in range(1, max_iters + 1):
        v_new = r + game.gamma * (P @ v)
        res = float(np.max(np.abs(v_new - v)))
        v = v_new
        if res <= stop:
            return v
    raise NonConvergenceError("policy evaluation did not converge", res, max_iters)


def policy_iteration(game, tol=DEFAULT_TOL, max_iters=1000):
    """Howard policy iteration from the all-null policy.

    Returns ``(policy, v)`` with ``policy`` an (S, n) array greedy with
    respect to ``v`` (lowest-index ties).
    """
    table = game.joint_action_table()
    null_joint = game.joint_index(game.null_action)
    joint = np.full(game.n_states, null_joint)
    states = np.arange(game.n_states)
    eval_tol = tol / 2
    for _ in range(max_iters):
        v = policy_evaluation(game, table[joint], eval_tol)
        q = game.reward + game.gamma * (game.transition @ v)
        best = argmax_lowest(q)
        current = q[states, joint]
        improve = q[states, best] > current + 1e-12 * np.maximum(1.0, np.abs(current))
        if not improve.any():
            return table[argmax_lowest(q)], v
        joint = np.where(improve, best, joint)
    raise NonConvergenceError("policy iteration did not stabilise", float("nan"), max_iters)


class CoalitionValues:
    """Lazy per-coalition solve cache for one game.

    Rewards are shifted by ``game.reward_shift`` first, since coalition
    analysis assumes nonnegative rewards.
    """

    def __init__(self, game, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS):
        self.source = game
        self.game = game.shifted()
        self.tol = tol
        self.max_iters = max_iters
        self._tables = {}
        self._subgames = {}

    @property
    def n_agents(self):
        return self.game.n_agents

    def _mask(self, coalition):
        return _check_coalition(self.game, coalition)

    def subgame(self, coalition):
        mask = self._mask(coalition)
        if mask.bits not in self._subgames:
            self._subgames[mask.bits] = build_coalition_subgame(self.game, mask)
        return self._subgames[mask.bits]

    def table(self, coalition):
        mask = self._mask(coalition)
        if mask.bits not in self._tables:
            self._tables[mask.bits] = optimal_coalition_value(self.game, mask, self.tol, self.max_iters)
        return self._tables[mask.bits]

    def value(self, coalition):
        return self.table(coalition).v

    def all_tables(self):
        return {c.bits: self.table(c) for c in all_coalitions(self.n_agents)}


@dataclass(frozen=True)
class ConvexityViolation:
    c: CoalitionMask
    d: CoalitionMask
    state: int
    slack: float


@dataclass(frozen=True)
class ConvexityReport:
    mode: str
    tol: float
    violations: tuple
    checked: int

    @property
    def passed(self):
        return not self.violations

    @property
    def min_slack(self):
        return min((v.slack for v in self.violations), default=0.0)


def check_convexity(game, mode="supermodular", tol=DEFAULT_TOL, cache=None):
    """List every coalition pair and state violating the convexity inequality.

    ``superadditive``: V(C u D) >= V(C) + V(D) for disjoint nonempty C, D.
    ``supermodular``: V(C u D) + V(C n D) >= V(C) + V(D) for all C, D.
    """
    if mode not in ("supermodular", "superadditive"):
        raise ValueError(f"unknown convexity mode {mode!r}")
    cache = cache or CoalitionValues(game, tol)
    n = game.n_agents
    masks = all_coalitions(n)
    vals = {m.bits: cache.value(m) for m in masks}
    violations = []
    checked = 0
    for c, d in itertools.combinations(masks, 2):
        if mode == "superadditive":
            if c.bits == 0 or not c.isdisjoint(d):
                continue
            slack = vals[c.bits | d.bits] - vals[c.bits] - vals[d.bits]
        else:
            if c.bits & d.bits in (c.bits, d.bits):
                continue  # nested pairs hold with equality
            slack = vals[c.bits | d.bits] + vals[c.bits & d.bits] - vals[c.bits] - vals[d.bits]
        checked += 1
        for s in np.flatnonzero(slack < -tol):
            violations.append(ConvexityViolation(c, d, int(s), float(slack[s])))
    return ConvexityReport(mode, tol, tuple(violations), checked)


def game_from_dict(data, name=""):
    """Build a game from the JSON schema used by game files."""
    required = ("n_agents", "actions_per_agent", "n_states", "gamma", "transition", "reward")
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"game definition missing keys: {missing}")
    if int(data["n_agents"]) != len(data["actions_per_agent"]):
        raise ConfigError("n_agents does not match actions_per_agent")
    P = np.array(data["transition"], dtype=float)
    if P.ndim != 3 or P.shape[0] != int(data["n_states"]):
        raise ConfigError(f"transition shape {P.shape} does not match n_states={data['n_states']}")
    return MarkovConvexGame(
        actions_per_agent=tuple(data["actions_per_agent"]),
        transition=P,
        reward=np.array(data["reward"], dtype=float),
        gamma=float(data["gamma"]),
        null_action=tuple(data["null_action"]) if data.get("null_action") is not None else None,
        reward_shift=float(data.get("reward_shift", 0.0)),
        name=data.get("name", name),
    )


def game_to_dict(game):
    return {
        "name": game.name,
        "n_agents": game.n_agents,
        "actions_per_agent": list(game.actions_per_agent),
        "null_action": list(game.null_action),
        "n_states": game.n_states,
        "gamma": game.gamma,
        "transition": game.transition.tolist(),
        "reward": game.reward.tolist(),
        "reward_shift": game.reward_shift,
    }


def load_game(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read game file {path}: {exc}") from exc
    return game_from_dict(data, name=path.stem)
