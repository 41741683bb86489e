"""Shapley-Bellman operator and its fixed point.

Per-agent tables ``q[i]`` have shape (S, A_i). One application of the
operator computes the joint one-step target

    Q_T(s, a) = R(s, a) + gamma * sum_s' P(s'|s, a) * sum_j max_a_j q_j(s', a_j)

picks the joint greedy action a*(s) = argmax_a Q_T(s, a) (lowest index on
ties) and stores for each agent

    q'_i(s, a_i) = w_i(s, a_i) * Q_T(s, (a_i, a*_{-i}(s))) - b_i(s).

With ``equal_credit`` the weight at the greedy slot a*_i is 1/n, so the
greedy entries of all agents split Q_T(s, a*) equally and their sum
follows joint value iteration. Rewards include the game's reward shift.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._util import argmax_lowest
from .errors import ContractionError, NonConvergenceError
from .mcg import DEFAULT_MAX_ITERS, joint_value_iteration


def sbo_norm(q):
    """max_s sum_i max_{a_i} |q_i(s, a_i)|."""
    return float(np.max(np.sum([np.max(np.abs(qi), axis=1) for qi in q], axis=0)))


def _diff(q1, q2):
    return [a - b for a, b in zip(q1, q2)]


@dataclass(frozen=True, eq=False)
class SboWeights:
    """Weights ``w[i]`` (S, A_i) > 0 and offsets ``b`` (n, S) >= 0.

    ``equal_credit`` overrides the weight of each agent's greedy slot
    with 1/n when the operator is applied.
    """

    w: tuple
    b: np.ndarray
    equal_credit: bool = True

    def __post_init__(self):
        w = tuple(np.array(wi, dtype=float) for wi in self.w)
        b = np.array(self.b, dtype=float)
        if any(np.any(wi <= 0) or not np.all(np.isfinite(wi)) for wi in w):
            raise ValueError("all weights must be finite and strictly positive")
        if b.shape != (len(w), w[0].shape[0]):
            raise ValueError(f"b must have shape ({len(w)}, {w[0].shape[0]}), got {b.shape}")
        if np.any(b < 0):
            raise ValueError("offsets b must be nonnegative")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)
        if np.max(self.constraint_residual) > 1e-12:
            raise ValueError("offsets violate sum_i b_i / w_i = 0; with b >= 0 this forces b = 0")

    @property
    def n_agents(self):
        return len(self.w)

    @property
    def constraint_residual(self):
        """Per state, sum_i b_i(s) / w_i(s, a_i) at its largest over actions."""
        return np.sum([self.b[i] / wi.min(axis=1) for i, wi in enumerate(self.w)], axis=0)

    def max_weight_sum(self):
        """Per state, sum_i max_{a_i} of the effective weight."""
        n = self.n_agents
        per_agent = []
        for wi in self.w:
            m = wi.max(axis=1)
            if self.equal_credit:
                m = np.maximum(m, 1.0 / n)
            per_agent.append(m)
        return np.sum(per_agent, axis=0)

    @classmethod
    def uniform(cls, game, equal_credit=True):
        n = game.n_agents
        w = [np.full((game.n_states, k), 1.0 / n) for k in game.actions_per_agent]
        return cls(tuple(w), np.zeros((n, game.n_states)), equal_credit)

    @classmethod
    def from_alpha(cls, alpha, equal_credit=True):
        """w_i = 1 / (n * alpha_i) for a per-agent alpha table (S, A_i) with alpha >= 1."""
        n = len(alpha)
        alpha = [np.asarray(a, dtype=float) for a in alpha]
        if any(np.any(a < 1) for a in alpha):
            raise ValueError("alpha must be >= 1 everywhere")
        w = tuple(1.0 / (n * a) for a in alpha)
        return cls(w, np.zeros((n, alpha[0].shape[0])), equal_credit)


@dataclass(frozen=True)
class ContractionCheck:
    ok: bool
    margin: float
    factor: float


def contraction_condition(weights, gamma):
    """Contraction holds iff max_s sum_i max_{a_i} w_i(s, a_i) < 1/gamma."""
    peak = float(np.max(weights.max_weight_sum()))
    margin = np.inf if gamma == 0 else 1.0 / gamma - peak
    return ContractionCheck(bool(margin > 0), float(margin), gamma * peak)


@dataclass(frozen=True, eq=False)
class SboApplication:
    q: tuple
    joint_greedy: np.ndarray
    target: np.ndarray
    contraction_ok: bool


def apply_sbo(q, weights, game):
    """One application of the operator; see the module docstring."""
    g = game.shifted()
    n = g.n_agents
    if len(q) != n or weights.n_agents != n:
        raise ValueError("q and weights need one table per agent")
    v_next = np.sum([np.max(qi, axis=1) for qi in q], axis=0)
    target = g.reward + g.gamma * (g.transition @ v_next)
    a_star = argmax_lowest(target)
    star_actions = g.joint_action_table()[a_star]
    states = np.arange(g.n_states)
    out = []
    for i, k in enumerate(g.actions_per_agent):
        stride = g.strides[i]
        base = a_star - star_actions[:, i] * stride
        cols = base[:, None] + np.arange(k)[None, :] * stride
        qi = weights.w[i] * target[states[:, None], cols] - weights.b[i][:, None]
        if weights.equal_credit:
            qi[states, star_actions[:, i]] = target[states, a_star] / n - weights.b[i]
        out.append(qi)
    ok = contraction_condition(weights, g.gamma).ok
    return SboApplication(tuple(out), a_star, target, ok)


@dataclass(frozen=True, eq=False)
class SboSolution:
    q: tuple
    residual: float
    iters: int
    greedy_policy: np.ndarray
    joint_greedy: np.ndarray
    ratios: tuple
    contraction_factor: float
    weights: SboWeights


def solve_sboe(game, weights=None, tol=1e-8, max_iters=DEFAULT_MAX_ITERS, init=None,
               ratio_floor=1e-6):
    """Iterate the operator from ``init`` (default zeros) to a fixed point.

    Stops at the first iterate whose residual ||SBO(q) - q|| is <= tol.
    ``ratios`` records ||q_{k+1} - q_k|| / ||q_k - q_{k-1}|| for sweeps in
    which the joint greedy action did not change and the previous
    difference exceeded ``ratio_floor`` times the table norm.
    """
    if weights is None:
        weights = SboWeights.uniform(game)
    check = contraction_condition(weights, game.gamma)
    if not check.ok:
        raise ContractionError(
            f"weights violate the contraction condition: max_s sum_i max w_i exceeds 1/gamma "
            f"by {-check.margin:.4g}")
    if init is None:
        q = tuple(np.zeros((game.n_states, k)) for k in game.actions_per_agent)
    else:
        q = tuple(np.array(qi, dtype=float) for qi in init)
    ratios = []
    prev_diff = None
    prev_greedy = None
    res = np.inf
    for it in range(max_iters):
        app = apply_sbo(q, weights, game)
        res = sbo_norm(_diff(app.q, q))
        if res <= tol:
            greedy = np.stack([argmax_lowest(qi) for qi in q], axis=1)
            return SboSolution(q, res, it, greedy, app.joint_greedy, tuple(ratios), check.factor, weights)
        same = prev_greedy is not None and np.array_equal(prev_greedy, app.joint_greedy)
        if same and prev_diff is not None and prev_diff > ratio_floor * max(1.0, sbo_norm(q)):
            ratios.append(res / prev_diff)
        prev_diff, prev_greedy = res, app.joint_greedy
        q = app.q
    raise NonConvergenceError("Shapley-Bellman iteration did not converge", res, max_iters)


def equal_credit_check(solution, game, tol=1e-8):
    """|q_i(s, a*_i) - V*(s)/n| <= tol for every agent and state."""
    w = solution.weights
    if not w.equal_credit or np.any(w.b != 0):
        raise ValueError("equal-credit check applies only to b = 0 with 1/n weights at the optimum")
    g = game.shifted()
    v_star = joint_value_iteration(g, tol=min(tol, 1e-10) * 1e-2).v
    n = g.n_agents
    states = np.arange(g.n_states)
    gaps = [np.abs(qi[states, solution.greedy_policy[:, i]] - v_star / n) for i, qi in enumerate(solution.q)]
    return bool(np.max(gaps) <= tol)
