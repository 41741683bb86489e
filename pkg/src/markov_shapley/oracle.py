"""Brute-force references used to validate the solvers.

Nothing here calls into the solver modules: coalition values come from
policy iteration with direct linear solves, Shapley values from explicit
permutation enumeration, and finite-horizon values from exhaustive
backups. Only the plain game containers are shared.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError

MAX_ORACLE_AGENTS = 8
MAX_TREE_HORIZON = 12


@dataclass(frozen=True)
class OracleReport:
    target: str
    max_abs_deviation: float
    worst_case: str
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.max_abs_deviation)) and self.max_abs_deviation <= self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.target}: max |dev| = {self.max_abs_deviation:.3e} "
                f"(tol {self.tolerance:.1e}) worst: {self.worst_case}")


def _decode(index, actions):
    out = []
    for k in actions:
        out.append(index % k)
        index //= k
    return out


def _members_table(game, members):
    """Joint indices reachable when only ``members`` move (others at null)."""
    acts = game.actions_per_agent
    idx = []
    for j in range(int(np.prod(acts))):
        a = _decode(j, acts)
        if all(a[i] == game.null_action[i] for i in range(len(acts)) if i not in members):
            idx.append(j)
    return idx


def coalition_value_pi(game, members, max_iters=10_000):
    """Optimal coalition value by Howard policy iteration with exact solves.

    Rewards include ``reward_shift``.
    """
    members = set(members)
    cols = _members_table(game, members)
    R = np.asarray(game.reward)[:, cols] + game.reward_shift
    P = np.asarray(game.transition)[:, cols, :]
    S = R.shape[0]
    pol = np.zeros(S, dtype=int)
    eye = np.eye(S)
    for _ in range(max_iters):
        Pp = P[np.arange(S), pol]
        rp = R[np.arange(S), pol]
        v = np.linalg.solve(eye - game.gamma * Pp, rp)
        q = R + game.gamma * np.einsum("sat,t->sa", P, v)
        new = pol.copy()
        for s in range(S):
            best = q[s].max()
            if best > q[s, pol[s]] + 1e-13 * max(1.0, abs(best)):
                new[s] = int(np.argmax(q[s]))
        if np.array_equal(new, pol):
            return v
        pol = new
    raise RuntimeError("oracle policy iteration did not stabilise")


def perm_shapley(game, s=None):
    """Shapley value by averaging marginal contributions over all n! orders.

    Returns an (n,) array for state ``s`` or (n, S) when ``s`` is None.
    """
    n = game.n_agents
    if n > MAX_ORACLE_AGENTS:
        raise CapacityError(f"permutation oracle limited to {MAX_ORACLE_AGENTS} agents")
    values = {}

    def val(members):
        key = frozenset(members)
        if key not in values:
            values[key] = coalition_value_pi(game, key)
        return values[key]

    totals = [[] for _ in range(n)]
    for order in itertools.permutations(range(n)):
        before = []
        for agent in order:
            totals[agent].append(val(before + [agent]) - val(before))
            before.append(agent)
    count = math.factorial(n)
    out = np.array([[math.fsum(col) / count for col in zip(*rows)] for rows in totals])
    return out if s is None else out[:, s]


def expectimax(game, start, horizon):
    """Optimal ``horizon``-step discounted value from state ``start``.

    Memoised on (state, steps remaining); this is the exhaustive backup of
    the expectimax tree. Rewards are used as given (no reward shift), like
    the value-iteration solvers it checks.
    """
    acts = game.actions_per_agent
    n_joint = int(np.prod(acts))
    R = np.asarray(game.reward)
    P = np.asarray(game.transition)
    memo = {}

    def value(s, k):
        if k == 0:
            return 0.0
        if (s, k) not in memo:
            best = -math.inf
            for a in range(n_joint):
                cont = math.fsum(P[s, a, t] * value(t, k - 1) for t in range(P.shape[2]) if P[s, a, t] > 0)
                best = max(best, R[s, a] + game.gamma * cont)
            memo[(s, k)] = best
        return memo[(s, k)]

    return value(int(start), int(horizon))


def rollout_value(game, start, horizon, policy):
    """Finite-horizon value of a fixed per-agent policy (S, n) from ``start``."""
    acts = game.actions_per_agent
    R = np.asarray(game.reward)
    P = np.asarray(game.transition)

    def joint(s):
        idx, mult = 0, 1
        for i, k in enumerate(acts):
            idx += int(policy[s][i]) * mult
            mult *= k
        return idx

    memo = {}

    def value(s, k):
        if k == 0:
            return 0.0
        if (s, k) not in memo:
            a = joint(s)
            memo[(s, k)] = R[s, a] + game.gamma * math.fsum(
                P[s, a, t] * value(t, k - 1) for t in range(P.shape[2]) if P[s, a, t] > 0)
        return memo[(s, k)]

    return value(int(start), int(horizon))


def tail_horizon(game, tol):
    """Smallest horizon whose truncation error gamma^H R_max / (1 - gamma) is below tol."""
    rmax = float(np.max(np.abs(np.asarray(game.reward))))
    if game.gamma == 0 or rmax == 0:
        return 1
    return int(math.ceil(math.log(tol * (1 - game.gamma) / rmax) / math.log(game.gamma))) + 1


@dataclass(frozen=True)
class OracleCoreReport:
    slack: dict      # frozenset of members -> per-state slack
    tol: float

    @property
    def in_core(self):
        return all(min(v) >= -self.tol for v in self.slack.values())

    @property
    def min_slack(self):
        return min(min(v) for v in self.slack.values())


def enumerate_core(game, payoffs, tol=1e-8):
    """Core inequalities by direct enumeration of member lists."""
    n = game.n_agents
    x = np.asarray(payoffs, dtype=float)
    if x.ndim == 1:
        x = np.repeat(x[:, None], len(game.reward), axis=1)
    slack = {}
    for size in range(1, n + 1):
        for members in itertools.combinations(range(n), size):
            v = coalition_value_pi(game, members)
            slack[frozenset(members)] = [
                math.fsum(x[i][s] for i in members) - v[s] for s in range(len(v))]
    return OracleCoreReport(slack, tol)


def pomcg_expectimax(pomcg, belief, horizon, coalition=None, cs_tag=0):
    """Optimal ``horizon``-step value of a belief by full tree expansion.

    Each node branches over every coalition action and every observation
    with positive probability; beliefs are recomputed by Bayes' rule here
    rather than through the POMCG module. Subtrees rooted at the same
    (belief, steps-left) pair are evaluated once.
    """
    if horizon > MAX_TREE_HORIZON:
        raise CapacityError(f"tree expectimax limited to horizon {MAX_TREE_HORIZON}")
    base = pomcg.base
    n = base.n_agents
    members = set(range(n)) if coalition is None else set(coalition)
    cols = _members_table(base, members)
    R = np.asarray(base.reward)
    P = np.asarray(base.transition)
    O = np.asarray(pomcg.obs_prob[cs_tag])
    S = P.shape[0]
    memo = {}

    def value(b, k):
        if k == 0:
            return 0.0
        key = (tuple(round(x, 12) for x in b), k)
        if key in memo:
            return memo[key]
        best = -math.inf
        for a in cols:
            r = math.fsum(b[s] * R[s, a] for s in range(S))
            pred = [math.fsum(b[s] * P[s, a, t] for s in range(S)) for t in range(S)]
            cont = []
            for o in range(O.shape[2]):
                joint = [O[a, t, o] * pred[t] for t in range(S)]
                p_o = math.fsum(joint)
                if p_o <= 0:
                    continue
                cont.append(p_o * value([j / p_o for j in joint], k - 1))
            best = max(best, r + base.gamma * math.fsum(cont))
        memo[key] = best
        return best

    return value(list(np.asarray(belief, dtype=float)), int(horizon))
