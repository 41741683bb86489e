"""Partially observable Markov convex games solved as belief MDPs.

Observation kernels are stored per coalition-structure tag as arrays
``obs_prob[tag][a, s', o]`` over joint actions and joint observations
(agent 0's observation varies fastest). Beliefs are probability vectors
over states; identical beliefs are merged at a 1e-9 resolution.

Two kinds of finite belief MDPs are supported:

* closed belief sets, where every in-support update lands back in the set
  (infinite-horizon solves);
* layered sets of (belief, steps-to-go) nodes for an H-step horizon, with
  depth-0 nodes absorbing at value 0 (finite-horizon solves).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import argmax_lowest
from .errors import CapacityError, ConfigError, ImpossibleObservationError, NonConvergenceError
from .mcg import (DEFAULT_MAX_ITERS, CoalitionMask, all_coalitions, build_coalition_subgame,
                  game_from_dict, game_to_dict, subsets_excluding)

DEDUP = 1e-9
DEFAULT_CAP = 100_000


class OpenBeliefSetError(ValueError):
    """A belief update leaves the supplied belief set."""

    def __init__(self, belief, action, observation):
        super().__init__(f"belief set is not closed: belief {np.round(belief, 12).tolist()} under joint "
                         f"action {action} and observation {observation} leaves the set")
        self.belief = belief


@dataclass(frozen=True, eq=False)
class Pomcg:
    base: object                    # MarkovConvexGame
    obs_per_agent: tuple
    obs_prob: np.ndarray            # (n_tags, A, S, O)
    initial_state_dist: np.ndarray
    cs_tags: tuple = None           # per tag: tuple of blocks (tuples of agents)
    name: str = ""

    def __post_init__(self):
        base = self.base
        O = np.array(self.obs_prob, dtype=float)
        if O.ndim == 3:
            O = O[None]
        n_obs = int(np.prod(self.obs_per_agent))
        if len(self.obs_per_agent) != base.n_agents:
            raise ConfigError("need one observation count per agent")
        if O.shape[1:] != (base.n_joint, base.n_states, n_obs):
            raise ConfigError(f"obs_prob must have shape (tags, {base.n_joint}, {base.n_states}, {n_obs}), "
                              f"got {O.shape}")
        if np.any(O < 0) or np.max(np.abs(O.sum(axis=3) - 1)) > 1e-12:
            raise ConfigError("observation rows must be nonnegative and sum to 1")
        b0 = np.array(self.initial_state_dist, dtype=float)
        if b0.shape != (base.n_states,) or np.any(b0 < 0) or abs(b0.sum() - 1) > 1e-12:
            raise ConfigError("initial_state_dist must be a probability vector over states")
        tags = self.cs_tags
        if tags is None:
            tags = (((tuple(range(base.n_agents))),),) * O.shape[0]
        tags = tuple(tuple(tuple(int(i) for i in block) for block in cs) for cs in tags)
        if len(tags) != O.shape[0]:
            raise ConfigError("one coalition structure per observation tag")
        for cs in tags:
            agents = sorted(i for block in cs for i in block)
            if agents != list(range(base.n_agents)):
                raise ConfigError(f"coalition structure {cs} does not partition the agents")
        O.setflags(write=False)
        b0.setflags(write=False)
        object.__setattr__(self, "obs_prob", O)
        object.__setattr__(self, "initial_state_dist", b0)
        object.__setattr__(self, "cs_tags", tags)
        object.__setattr__(self, "obs_per_agent", tuple(int(k) for k in self.obs_per_agent))

    @property
    def n_obs(self):
        return self.obs_prob.shape[3]

    @property
    def n_states(self):
        return self.base.n_states

    def tags_for(self, coalition):
        """Tags whose coalition structure contains ``coalition`` as a block."""
        members = tuple(coalition.members)
        return [k for k, cs in enumerate(self.cs_tags) if members in cs]


def tag_for(pomcg, coalition):
    """First tag containing the coalition as a block, else tag 0."""
    tags = pomcg.tags_for(coalition)
    return tags[0] if tags else 0


@dataclass(frozen=True, eq=False)
class BeliefState:
    probs: np.ndarray
    cs_tag: int = 0

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if np.any(p < -1e-15) or abs(p.sum() - 1) > 1e-12:
            raise ValueError("belief must be nonnegative and sum to 1 within 1e-12")
        p = np.clip(p, 0.0, None)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def key(self):
        return belief_key(self.probs)


def belief_key(probs):
    return tuple(int(v) for v in np.rint(np.asarray(probs) / DEDUP))


def initial_belief(pomcg, cs_tag=0):
    return BeliefState(pomcg.initial_state_dist, cs_tag)


def _predict(pomcg, probs, a):
    return probs @ pomcg.base.transition[:, a, :]


def observation_likelihood(pomcg, b, a):
    """Pr(o' | b, a, CS) for every joint observation."""
    pred = _predict(pomcg, b.probs, a)
    return pred @ pomcg.obs_prob[b.cs_tag, a]


def belief_update(pomcg, b, a, o):
    """Bayes update b'(s') ~ Omega(o'|s', a) sum_s P(s'|s, a) b(s)."""
    joint = pomcg.obs_prob[b.cs_tag, a, :, o] * _predict(pomcg, b.probs, a)
    total = joint.sum()
    if total <= 0:
        raise ImpossibleObservationError(f"observation {o} has zero probability after action {a}")
    return BeliefState(joint / total, b.cs_tag)


def belief_reward(pomcg, b, a):
    """Expected reward of joint action ``a`` under belief ``b``."""
    return float(b.probs @ pomcg.base.reward[:, a])


def _branches(pomcg, probs, a, tag):
    pred = _predict(pomcg, probs, a)
    joint = pomcg.obs_prob[tag, a] * pred[:, None]   # (S, O)
    p_obs = joint.sum(axis=0)
    out = []
    for o in range(pomcg.n_obs):
        if p_obs[o] > 0:
            out.append((o, float(p_obs[o]), joint[:, o] / p_obs[o]))
    return out


def _joint_actions_of(pomcg, coalition):
    if coalition is None:
        return np.arange(pomcg.base.n_joint)
    return build_coalition_subgame(pomcg.base, coalition).joint_index


def reachable_beliefs(pomcg, horizon, cs_tag=0, coalition=None, cap=DEFAULT_CAP, start=None):
    """Beliefs reachable from the initial belief within ``horizon`` steps.

    Expands every joint action of ``coalition`` (all agents by default) and
    every observation of positive probability; returned in lexicographic
    order of their probability vectors.
    """
    actions = _joint_actions_of(pomcg, coalition)
    b0 = pomcg.initial_state_dist if start is None else np.asarray(start, dtype=float)
    seen = {belief_key(b0): b0}
    frontier = [b0]
    for _ in range(int(horizon)):
        nxt = []
        for probs in frontier:
            for a in actions:
                for _, _, post in _branches(pomcg, probs, a, cs_tag):
                    k = belief_key(post)
                    if k not in seen:
                        seen[k] = post
                        nxt.append(post)
                        if len(seen) > cap:
                            raise CapacityError(f"more than {cap} reachable beliefs")
        frontier = nxt
        if not frontier:
            break
    return [BeliefState(seen[k], cs_tag) for k in sorted(seen)]


def closed_beliefs(pomcg, cs_tag=0, cap=DEFAULT_CAP, start=None):
    """The full reachable set; raises CapacityError if it exceeds ``cap``."""
    return reachable_beliefs(pomcg, cap + 1, cs_tag, None, cap, start)


@dataclass(frozen=True, eq=False)
class BeliefMdp:
    """Finite belief MDP over joint actions.

    ``succ[n, a, o]`` is the successor node and ``succ_p[n, a, o]`` its
    probability (0 for impossible observations). ``steps_left`` is None for
    closed sets and the remaining horizon of each node for layered sets.
    """

    beliefs: np.ndarray       # (B, S)
    reward: np.ndarray        # (B, A)
    succ: np.ndarray
    succ_p: np.ndarray
    cs_tag: int
    gamma: float
    steps_left: np.ndarray = None
    index: dict = field(default=None, repr=False)   # (key, steps_left or None) -> node

    @property
    def n_nodes(self):
        return self.beliefs.shape[0]

    def node(self, belief, steps_left=None):
        probs = belief.probs if isinstance(belief, BeliefState) else belief
        return self.index[(belief_key(probs), steps_left)]

    def backup(self, v):
        """sum_o p(o) v(successor) per (node, joint action)."""
        return np.sum(self.succ_p * v[self.succ], axis=2)


def closed_belief_mdp(pomcg, beliefs, cs_tag=0):
    """Belief MDP on a set that must be closed under every joint action."""
    base = pomcg.base
    probs = np.array([b.probs for b in beliefs])
    index = {(belief_key(p), None): k for k, p in enumerate(probs)}
    B, A, O = len(probs), base.n_joint, pomcg.n_obs
    succ = np.zeros((B, A, O), dtype=int)
    succ_p = np.zeros((B, A, O))
    for n, p in enumerate(probs):
        for a in range(A):
            for o, po, post in _branches(pomcg, p, a, cs_tag):
                k = (belief_key(post), None)
                if k not in index:
                    raise OpenBeliefSetError(p, a, o)
                succ[n, a, o] = index[k]
                succ_p[n, a, o] = po
    reward = probs @ base.reward
    return BeliefMdp(probs, reward, succ, succ_p, cs_tag, base.gamma, None, index)


def layered_belief_mdp(pomcg, roots, horizon, cs_tag=0, cap=DEFAULT_CAP):
    """Nodes (belief, k) for k = horizon .. 0 reachable from ``roots`` at k = horizon."""
    base = pomcg.base
    A, O = base.n_joint, pomcg.n_obs
    index, probs_list, steps = {}, [], []

    def add(p, k):
        key = (belief_key(p), k)
        if key not in index:
            index[key] = len(probs_list)
            probs_list.append(np.asarray(p, dtype=float))
            steps.append(k)
            if len(probs_list) > cap:
                raise CapacityError(f"more than {cap} layered belief nodes")
        return index[key]

    layer = [add(b.probs if isinstance(b, BeliefState) else b, horizon) for b in roots]
    edges = {}
    for k in range(horizon, 0, -1):
        nxt = []
        for n in dict.fromkeys(layer):
            for a in range(A):
                for o, po, post in _branches(pomcg, probs_list[n], a, cs_tag):
                    before = len(probs_list)
                    m = add(post, k - 1)
                    if len(probs_list) > before:
                        nxt.append(m)
                    edges[(n, a, o)] = (m, po)
        layer = nxt
    B = len(probs_list)
    succ = np.tile(np.arange(B)[:, None, None], (1, A, O))
    succ_p = np.zeros((B, A, O))
    for (n, a, o), (m, po) in edges.items():
        succ[n, a, o] = m
        succ_p[n, a, o] = po
    probs = np.array(probs_list)
    steps_left = np.array(steps)
    reward = probs @ base.reward
    reward[steps_left == 0] = 0.0
    return BeliefMdp(probs, reward, succ, succ_p, cs_tag, base.gamma, steps_left, index)


@dataclass(frozen=True, eq=False)
class PosviResult:
    mdp: BeliefMdp
    coalition: CoalitionMask
    actions: np.ndarray       # joint index of each coalition action
    q: np.ndarray             # (B, A_C)
    v: np.ndarray             # (B,)
    iterations: int
    residual: float

    def value(self, belief, steps_left=None):
        return float(self.v[self.mdp.node(belief, steps_left)])

    def greedy(self):
        return argmax_lowest(self.q)


def _belief_mdp_for(pomcg, beliefs, cs_tag, horizon):
    if horizon is None:
        if beliefs is None:
            beliefs = closed_beliefs(pomcg, cs_tag)
        return closed_belief_mdp(pomcg, beliefs, cs_tag)
    if beliefs is None:
        beliefs = reachable_beliefs(pomcg, horizon, cs_tag)
    return layered_belief_mdp(pomcg, beliefs, int(horizon), cs_tag)


def posvi(pomcg, coalition=None, beliefs=None, tol=1e-10, max_iters=DEFAULT_MAX_ITERS,
          cs_tag=None, horizon=None, mdp=None):
    """Value iteration on coalition Q-values over beliefs.

    Q(b, a_C) = R_b(b, a_C) + gamma * sum_o Pr(o | b, a_C) max_a' Q(tau(b, a_C, o), a').
    With ``horizon`` the backup runs on layered (belief, steps-left) nodes
    rooted at ``beliefs`` (default: beliefs reachable within the horizon).
    """
    n = pomcg.base.n_agents
    coalition = CoalitionMask.grand(n) if coalition is None else coalition
    if cs_tag is None:
        cs_tag = tag_for(pomcg, coalition)
    if mdp is None:
        mdp = _belief_mdp_for(pomcg, beliefs, cs_tag, horizon)
    cols = _joint_actions_of(pomcg, coalition)
    R = mdp.reward[:, cols]
    succ, succ_p = mdp.succ[:, cols], mdp.succ_p[:, cols]
    gamma = mdp.gamma
    stop = tol * (1 - gamma)
    q = np.zeros_like(R)
    res = np.inf
    for it in range(1, max_iters + 1):
        v = q.max(axis=1)
        q_new = R + gamma * np.sum(succ_p * v[succ], axis=2)
        res = float(np.max(np.abs(q_new - q)))
        q = q_new
        if res <= stop:
            return PosviResult(mdp, coalition, cols, q, q.max(axis=1), it, res)
    raise NonConvergenceError("belief value iteration did not converge", res, max_iters)


@dataclass(frozen=True, eq=False)
class PospiResult:
    mdp: BeliefMdp
    policy: np.ndarray        # (B, n) per-agent actions
    values: dict              # coalition bits -> (B,)
    q: dict                   # coalition bits -> (B, A_C)
    iterations: int
    history: tuple            # per iteration: dict bits -> (B,)


def _evaluate(mdp, joint, tol, max_iters):
    nodes = np.arange(mdp.n_nodes)
    r = mdp.reward[nodes, joint]
    succ, succ_p = mdp.succ[nodes, joint], mdp.succ_p[nodes, joint]
    v = np.zeros(mdp.n_nodes)
    stop = tol * (1 - mdp.gamma)
    for _ in range(max_iters):
        v_new = r + mdp.gamma * np.sum(succ_p * v[succ], axis=1)
        res = float(np.max(np.abs(v_new - v)))
        v = v_new
        if res <= stop:
            return v
    raise NonConvergenceError("belief policy evaluation did not converge", res, max_iters)


def pospi(pomcg, beliefs=None, tol=1e-10, cs_tag=0, horizon=None, max_iters=1000,
          eval_max_iters=DEFAULT_MAX_ITERS, mdp=None):
    """Shapley policy iteration over beliefs for a single coalition structure.

    Every coalition follows the members' components of one joint policy
    (non-members null). Evaluation solves each coalition's value; agent i
    then picks, belief by belief and in agent order,

        argmax_{a_i} sum_{C subset N\\{i}} w(|C|) [Q_{C+i}(b, (pi_C(b), a_i)) - Q_C(b, pi_C(b))]

    keeping its current action unless another is strictly better.
    """
    from .shapley import coalition_weight
    base = pomcg.base
    n = base.n_agents
    if mdp is None:
        mdp = _belief_mdp_for(pomcg, beliefs, cs_tag, horizon)
    B = mdp.n_nodes
    masks = all_coalitions(n)
    strides = base.strides
    null = np.array(base.null_action)
    policy = np.tile(null, (B, 1))
    history = []

    def joint_of(pol, c):
        acts = np.where(np.isin(np.arange(n), c.members)[None, :], pol, null[None, :])
        return acts @ np.array(strides)

    for it in range(1, max_iters + 1):
        values = {c.bits: _evaluate(mdp, joint_of(policy, c), tol / 2, eval_max_iters) for c in masks}
        history.append(values)
        qfull = {c.bits: mdp.reward + mdp.gamma * mdp.backup(values[c.bits]) for c in masks}
        changed = False
        for i in range(n):
            k_i = base.actions_per_agent[i]
            score = np.zeros((B, k_i))
            for c in subsets_excluding(i, n):
                w = coalition_weight(n, c.size)
                ci = c.with_agent(i)
                base_joint = joint_of(policy, c)
                cur = qfull[c.bits][np.arange(B), base_joint]
                for a in range(k_i):
                    cand = base_joint + (a - null[i]) * strides[i]
                    score[:, a] += w * (qfull[ci.bits][np.arange(B), cand] - cur)
            current = score[np.arange(B), policy[:, i]]
            best = argmax_lowest(score)
            better = score[np.arange(B), best] > current + 1e-12 * np.maximum(1.0, np.abs(current))
            if better.any():
                policy[better, i] = best[better]
                changed = True
        if not changed:
            q = {}
            for c in masks:
                cols = _joint_actions_of(pomcg, c)
                q[c.bits] = qfull[c.bits][:, cols]
            return PospiResult(mdp, policy, values, q, it, tuple(history))
    raise NonConvergenceError("belief policy iteration did not stabilise", float("nan"), max_iters)


@dataclass(frozen=True)
class BeliefSample:
    node: int
    action: int        # joint action index
    state: int
    next_state: int
    observation: int
    reward: float


def sample_belief_transition(pomcg, mdp, node, action, rng):
    """Draw s ~ b, s' ~ P(.|s, a), o' ~ Omega(.|s', a) at a belief node."""
    b = mdp.beliefs[node]
    s = int(rng.choice(len(b), p=b))
    s2 = int(rng.choice(pomcg.n_states, p=pomcg.base.transition[s, action]))
    o = int(rng.choice(pomcg.n_obs, p=pomcg.obs_prob[mdp.cs_tag, action, s2]))
    return BeliefSample(node, int(action), s, s2, o, float(pomcg.base.reward[s, action]))


def sampled_belief_q_update(mdp, q, sample, actions, step_size=1.0):
    """Q(b, a) <- (1 - eta) Q(b, a) + eta [R(s, a) + gamma max Q(tau(b, a, o'), .)].

    ``q`` is (B, A_C) over the coalition's actions ``actions`` (joint
    indices). Returns an updated copy.
    """
    col = int(np.flatnonzero(np.asarray(actions) == sample.action)[0])
    nxt = mdp.succ[sample.node, sample.action, sample.observation]
    if mdp.succ_p[sample.node, sample.action, sample.observation] <= 0:
        raise ImpossibleObservationError("sampled observation has zero probability at this belief")
    target = sample.reward + mdp.gamma * float(np.max(q[nxt]))
    out = np.array(q, dtype=float)
    out[sample.node, col] = (1 - step_size) * out[sample.node, col] + step_size * target
    return out


def belief_coalition_values(pomcg, beliefs=None, cs_tag=0, tol=1e-10, horizon=None):
    """Optimal value of every coalition on one shared belief MDP."""
    mdp = _belief_mdp_for(pomcg, beliefs, cs_tag, horizon)
    n = pomcg.base.n_agents
    out = {}
    for c in all_coalitions(n):
        out[c.bits] = posvi(pomcg, c, tol=tol, cs_tag=cs_tag, mdp=mdp)
    return mdp, out


def belief_msv(results, n_agents):
    """Per-agent Shapley values (n, B) from coalition posvi results."""
    from .shapley import coalition_weight
    from ._util import fsum_stack
    rows = []
    for i in range(n_agents):
        terms = []
        for c in subsets_excluding(i, n_agents):
            w = coalition_weight(n_agents, c.size)
            terms.append(w * (results[c.with_agent(i).bits].v - results[c.bits].v))
        rows.append(fsum_stack(terms))
    return np.array(rows)


def pomcg_from_dict(data, name=""):
    base = game_from_dict(data, name)
    for key in ("observations", "obs_prob", "initial_state_dist"):
        if key not in data:
            raise ConfigError(f"POMDP definition missing key {key!r}")
    tags = data.get("cs_tags")
    return Pomcg(base, tuple(data["observations"]), np.array(data["obs_prob"], dtype=float),
                 np.array(data["initial_state_dist"], dtype=float),
                 None if tags is None else tuple(tuple(tuple(b) for b in cs) for cs in tags),
                 data.get("name", name))


def pomcg_to_dict(pomcg):
    out = game_to_dict(pomcg.base)
    out.update({
        "name": pomcg.name,
        "observations": list(pomcg.obs_per_agent),
        "obs_prob": pomcg.obs_prob.tolist(),
        "initial_state_dist": pomcg.initial_state_dist.tolist(),
        "cs_tags": [[list(b) for b in cs] for cs in pomcg.cs_tags],
    })
    return out


def load_pomcg(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read POMDP file {path}: {exc}") from exc
    return pomcg_from_dict(data, name=path.stem)
