"""Marginal contributions, Markov Shapley values and the Markov core.

All coalition values come from a single ``CoalitionValues`` cache per game,
so the marginal contributions along any permutation telescope exactly to
the grand-coalition value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ._util import fsum_stack
from .errors import CapacityError, InvalidCoalitionError
from .mcg import CoalitionMask, CoalitionValues, all_coalitions, subsets_excluding

MAX_EXACT_AGENTS = 12


def coalition_weight_exact(n, c_size):
    """|C|! (n - |C| - 1)! / n! as a Fraction."""
    if not 0 <= c_size <= n - 1:
        raise ValueError(f"coalition size must be in [0, {n - 1}], got {c_size}")
    return Fraction(math.factorial(c_size) * math.factorial(n - c_size - 1), math.factorial(n))


def coalition_weight(n, c_size):
    """Probability that a uniformly random ordering puts exactly a given
    set of ``c_size`` agents before agent i."""
    return float(coalition_weight_exact(n, c_size))


def _cache(game, cache):
    if cache is None:
        return CoalitionValues(game)
    return cache


def _as_mask(coalition, n):
    if isinstance(coalition, CoalitionMask):
        return coalition
    if isinstance(coalition, (int, np.integer)):
        return CoalitionMask(int(coalition), n)
    return CoalitionMask.from_members(tuple(coalition), n)


def _check_agent_outside(i, coalition, n):
    if not 0 <= i < n:
        raise InvalidCoalitionError(f"agent {i} outside 0..{n - 1}")
    if i in coalition:
        raise InvalidCoalitionError(f"agent {i} is already a member of {coalition}")


def marginal_contribution(game, i, coalition, s=None, cache=None):
    """V*_{C u {i}}(s) - V*_C(s); an array over states when ``s`` is None."""
    cache = _cache(game, cache)
    c = _as_mask(coalition, game.n_agents)
    _check_agent_outside(i, c, game.n_agents)
    phi = cache.value(c.with_agent(i)) - cache.value(c)
    return phi if s is None else float(phi[s])


def _action_mc_table(cache, i, c):
    """Array (S, A_i): max_{a_C} Q*_{C u {i}}(s, (a_C, a_i)) - V*_C(s)."""
    joined = c.with_agent(i)
    q = cache.table(joined).q
    own = cache.subgame(joined).action_of(i)
    n_own = cache.game.actions_per_agent[i]
    best = np.full((q.shape[0], n_own), -np.inf)
    for a in range(n_own):
        best[:, a] = q[:, own == a].max(axis=1)
    return best - cache.value(c)[:, None]


def action_marginal_contribution(game, i, coalition, s, a_i, cache=None):
    """Gain of agent ``i`` joining ``coalition`` while committed to ``a_i``.

    Members of the coalition re-optimise given ``a_i``; at the per-agent
    greedy action this equals :func:`marginal_contribution`.
    """
    cache = _cache(game, cache)
    c = _as_mask(coalition, game.n_agents)
    _check_agent_outside(i, c, game.n_agents)
    if not 0 <= a_i < game.actions_per_agent[i]:
        raise ValueError(f"action {a_i} out of range for agent {i}")
    return float(_action_mc_table(cache, i, c)[s, a_i])


@dataclass(frozen=True, eq=False)
class MsvTable:
    """Per-agent Markov Shapley values ``v`` (n, S) and Q-values ``q[i]`` (S, A_i)."""

    v: np.ndarray
    q: tuple
    sample_mode: str = "exact"
    source_tol: float = 0.0
    samples: int = None
    seed: int = None

    @property
    def n_agents(self):
        return self.v.shape[0]

    def at(self, s):
        """(v_i(s) per agent, [q_i(s, .) per agent])."""
        return self.v[:, s].copy(), [qi[s].copy() for qi in self.q]

    def greedy(self):
        """Per-agent greedy action per state, array (S, n)."""
        from ._util import argmax_lowest
        return np.stack([argmax_lowest(qi) for qi in self.q], axis=1)


def exact_msq(game, cache=None, max_agents=MAX_EXACT_AGENTS):
    """Exact Markov Shapley values and Q-values for every agent and state.

    Q^phi_i(s, a_i) = sum_{C subset N\\{i}} w(|C|) * Upsilon_i(s, a_i | C)
    with the weighted sum taken by compensated summation.
    """
    n = game.n_agents
    if n > max_agents:
        raise CapacityError(
            f"exact Shapley values need 2^(n-1) coalition solves per agent; n={n} exceeds "
            f"{max_agents}, use mc_msq (Monte-Carlo) instead")
    cache = _cache(game, cache)
    v_rows, q_tables = [], []
    for i in range(n):
        v_terms, q_terms = [], []
        for c in subsets_excluding(i, n):
            w = coalition_weight(n, c.size)
            v_terms.append(w * (cache.value(c.with_agent(i)) - cache.value(c)))
            q_terms.append(w * _action_mc_table(cache, i, c))
        v_rows.append(fsum_stack(v_terms))
        q_tables.append(fsum_stack(q_terms))
    return MsvTable(np.array(v_rows), tuple(q_tables), "exact", cache.tol)


def sample_coalition(i, n, rng):
    """Predecessors of agent ``i`` in a uniformly random ordering of N."""
    if not 0 <= i < n:
        raise InvalidCoalitionError(f"agent {i} outside 0..{n - 1}")
    order = rng.permutation(n)
    pos = int(np.flatnonzero(order == i)[0])
    return CoalitionMask.from_members(tuple(int(j) for j in order[:pos]), n)


def sample_stream(seed, index):
    """Independent counter-based generator for sample ``index`` of a run.

    Each sample owns its own Philox stream, so estimates do not depend on
    how samples are split across workers.
    """
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(index)]))


def mc_msq(game, i, s, a_i=None, M=1000, seed=0, exhaustive=False, cache=None):
    """Monte-Carlo estimate of Q^phi_i(s, a_i) (or of v_i(s) when ``a_i`` is None).

    Coalitions are the predecessors of ``i`` in ``M`` uniformly sampled
    orderings. ``exhaustive=True`` instead visits every coalition with its
    exact weight.
    """
    n = game.n_agents
    if not 0 <= i < n:
        raise InvalidCoalitionError(f"agent {i} outside 0..{n - 1}")
    cache = _cache(game, cache)

    def term(c):
        if a_i is None:
            return float(cache.value(c.with_agent(i))[s] - cache.value(c)[s])
        return float(_action_mc_table(cache, i, c)[s, a_i])

    if exhaustive:
        return math.fsum(coalition_weight(n, c.size) * term(c) for c in subsets_excluding(i, n))
    if M <= 0:
        raise ValueError("M must be a positive sample count")
    memo = {}
    total = []
    for k in range(M):
        c = sample_coalition(i, n, sample_stream(seed, k))
        if c.bits not in memo:
            memo[c.bits] = term(c)
        total.append(memo[c.bits])
    return math.fsum(total) / M


@dataclass(frozen=True, eq=False)
class CoreReport:
    """Slack sum_{i in C} x_i(s) - V*_C(s) for every nonempty coalition."""

    slack: dict
    tol: float
    n_agents: int

    @property
    def min_slack(self):
        return float(min(np.min(v) for v in self.slack.values()))

    @property
    def in_core(self):
        return self.min_slack >= -self.tol

    def worst(self):
        bits = min(self.slack, key=lambda b: np.min(self.slack[b]))
        return CoalitionMask(bits, self.n_agents), self.slack[bits]


def _payoff_array(game, payoffs):
    x = np.asarray(payoffs, dtype=float)
    if x.ndim == 1:
        x = np.repeat(x[:, None], game.n_states, axis=1)
    if x.shape != (game.n_agents, game.n_states):
        raise ValueError(f"payoffs must have shape ({game.n_agents}, {game.n_states}) or "
                         f"({game.n_agents},), got {np.shape(payoffs)}")
    return x


def check_markov_core(game, payoffs, tol=1e-8, cache=None):
    """Evaluate the core inequalities for payoffs x (n, S) or (n,)."""
    x = _payoff_array(game, payoffs)
    cache = _cache(game, cache)
    slack = {}
    for c in all_coalitions(game.n_agents)[1:]:
        slack[c.bits] = x[list(c.members)].sum(axis=0) - cache.value(c)
    return CoreReport(slack, tol, game.n_agents)


def find_dummies(game, atol=1e-12):
    """Agents whose action never changes the reward or the transition row."""
    table = game.joint_action_table()
    dummies = []
    for i in range(game.n_agents):
        strides = game.strides[i]
        ok = True
        base = table[:, i] == 0
        for a in range(1, game.actions_per_agent[i]):
            idx0 = np.flatnonzero(base)
            idx1 = idx0 + a * strides
            if (np.max(np.abs(game.reward[:, idx0] - game.reward[:, idx1])) > atol
                    or np.max(np.abs(game.transition[:, idx0] - game.transition[:, idx1])) > atol):
                ok = False
                break
        if ok:
            dummies.append(i)
    return tuple(dummies)


@dataclass(frozen=True, eq=False)
class FairnessReport:
    efficiency: bool
    efficiency_gap: np.ndarray
    value_efficiency_gap: np.ndarray
    dummy_agents: tuple
    dummy: bool
    symmetry: bool
    symmetry_gap: float

    @property
    def passed(self):
        return self.efficiency and self.dummy and self.symmetry


def verify_fairness(game, msv, tol=1e-8, symmetry=None, cache=None):
    """Check efficiency, the dummy property and declared symmetry.

    Efficiency compares sum_i max_{a_i} Q^phi_i(s, .) with the grand value
    net of the empty-coalition value. ``symmetry`` is an agent permutation
    (tuple) under which roles are interchangeable.
    """
    cache = _cache(game, cache)
    n = game.n_agents
    grand = cache.value(CoalitionMask.grand(n)) - cache.value(CoalitionMask.empty(n))
    q_sum = np.sum([qi.max(axis=1) for qi in msv.q], axis=0)
    gap = np.abs(q_sum - grand)
    v_gap = np.abs(msv.v.sum(axis=0) - grand)
    dummies = find_dummies(game)
    dummy_ok = all(np.all(np.abs(msv.v[i]) <= tol) for i in dummies)
    sym_gap = 0.0
    if symmetry is not None:
        if sorted(symmetry) != list(range(n)):
            raise ValueError(f"symmetry map {symmetry} is not a permutation of agents")
        sym_gap = float(max(np.max(np.abs(msv.v[i] - msv.v[j])) for i, j in enumerate(symmetry)))
    return FairnessReport(bool(np.all(gap <= tol)), gap, v_gap, dummies, bool(dummy_ok),
                          sym_gap <= tol, sym_gap)


def check_igm(joint_q, per_agent_q, actions_per_agent):
    """Per state: does the joint argmax equal the tuple of per-agent argmaxes?

    Exact argmax with lowest-index ties on both sides.
    """
    joint_q = np.asarray(joint_q, dtype=float)
    acts = tuple(int(k) for k in actions_per_agent)
    n_joint = int(np.prod(acts))
    if joint_q.ndim != 2 or joint_q.shape[1] != n_joint:
        raise ValueError(f"joint Q must have shape (S, {n_joint}), got {joint_q.shape}")
    if len(per_agent_q) != len(acts):
        raise ValueError("one per-agent table per agent is required")
    S = joint_q.shape[0]
    strides = [int(np.prod(acts[:i])) for i in range(len(acts))]
    joint_best = np.argmax(joint_q, axis=1)
    out = np.empty(S, dtype=bool)
    for qi, k in zip(per_agent_q, acts):
        if np.shape(qi) != (S, k):
            raise ValueError(f"per-agent table shape {np.shape(qi)} does not match ({S}, {k})")
    for s in range(S):
        idx = sum(int(np.argmax(qi[s])) * st for qi, st in zip(per_agent_q, strides))
        out[s] = idx == joint_best[s]
    return out
