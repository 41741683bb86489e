"""Cross-checks of every solver against the brute-force references.

Each check returns an ``OracleReport``; a suite is a list of them. The
checks mirror the acceptance properties: efficiency, dummy and symmetry,
the core, SBO convergence and equal credit, SHAQ learning, Monte-Carlo
Shapley error, belief-space solvers, and the feeder voltage math.
"""
from __future__ import annotations

import math

import numpy as np

from . import oracle
from ._util import argmax_lowest
from .envs import feeder as fd
from .envs import pomdp_fixtures as pf
from .envs.fixtures import all_fixtures, fixture, random_convex_game
from .experiments import run_training
from .mcg import CoalitionMask, CoalitionValues, joint_value_iteration
from .oracle import OracleReport
from .pomcg import closed_beliefs, layered_belief_mdp, pospi, posvi, reachable_beliefs
from .sbo import SboWeights, solve_sboe
from .shapley import check_markov_core, exact_msq, mc_msq
from .shaq import ShaqConfig, Transition, make_state, shaq_step

SUITES = ("shapley", "sbo", "shaq", "pomcg", "envs")
N_RANDOM_GAMES = 20
MC_SEEDS = 50
MC_SAMPLES = (10, 100, 1000)


def _report(target, devs, tol, labels):
    devs = [float(d) for d in devs]
    if not devs:
        return OracleReport(target, float("nan"), "no cases", tol)
    k = int(np.argmax(devs))
    return OracleReport(target, devs[k], labels[k], tol)


def _grand_minus_empty(game):
    n = game.n_agents
    return (np.array(oracle.coalition_value_pi(game, range(n)))
            - np.array(oracle.coalition_value_pi(game, ())))


# ---------------------------------------------------------------- shapley
def check_efficiency_random(n_games=N_RANDOM_GAMES, tol=1e-8):
    devs, labels = [], []
    for seed in range(n_games):
        game = random_convex_game(seed)
        msv = exact_msq(game)
        gap = np.abs(msv.v.sum(axis=0) - _grand_minus_empty(game))
        devs.append(gap.max())
        labels.append(f"random game seed {seed}, state {int(np.argmax(gap))}")
    return _report(f"efficiency on {n_games} random convex games", devs, tol, labels)


def check_permutation_shapley(tol=1e-9):
    games = [f.game for f in all_fixtures()] + [random_convex_game(s) for s in range(5)]
    devs, labels = [], []
    for game in games:
        gap = np.abs(exact_msq(game).v - oracle.perm_shapley(game))
        devs.append(gap.max())
        labels.append(game.name)
    return _report("exact MSV vs permutation enumeration", devs, tol, labels)


def check_dummy_symmetry(tol=1e-10):
    dummy, sym = [], []
    for fx in all_fixtures():
        msv = exact_msq(fx.game)
        for i in fx.dummies:
            dummy.append((np.max(np.abs(msv.v[i])), f"{fx.name} agent {i}"))
        if fx.symmetry is not None:
            gap = max(np.max(np.abs(msv.v[i] - msv.v[j])) for i, j in enumerate(fx.symmetry))
            sym.append((gap, fx.name))
    return [_report("dummy agents get zero", [d for d, _ in dummy], tol, [l for _, l in dummy]),
            _report("symmetric agents get equal values", [d for d, _ in sym], tol, [l for _, l in sym])]


def check_core(tol=1e-8):
    out = []
    member, agree, labels = [], [], []
    for fx in all_fixtures():
        msv = exact_msq(fx.game)
        rep = check_markov_core(fx.game, msv.v, tol)
        twin = oracle.enumerate_core(fx.game, msv.v, tol)
        gap = max(np.max(np.abs(np.asarray(twin.slack[frozenset(CoalitionMask(b, fx.game.n_agents).members)])
                                - rep.slack[b])) for b in rep.slack)
        verdict = float(rep.in_core != twin.in_core)
        agree.append(max(gap, verdict))
        labels.append(fx.name)
        if fx.supermodular:
            member.append((max(0.0, -rep.min_slack), fx.name))
        else:
            pair = min(float(np.min(rep.slack[c.bits])) for c in _pairs(fx.game.n_agents))
            flagged = not rep.in_core
            out.append(OracleReport(f"{fx.name} pair slack is -1/3 and flagged outside the core",
                                    abs(pair + 1 / 3) if flagged else math.inf,
                                    f"pair slack {pair:.12f}, in_core={rep.in_core}", 1e-9))
    out.insert(0, _report("optimal MSV lies in the Markov core", [d for d, _ in member], tol,
                          [l for _, l in member]))
    out.append(_report("core check agrees with enumeration", agree, 1e-8, labels))
    return out


def _pairs(n):
    return [CoalitionMask.from_members((i, j), n) for i in range(n) for j in range(i + 1, n)]


def mc_errors(game, samples=MC_SAMPLES, seeds=MC_SEEDS):
    """Per M: RMSE and RMSE relative to the largest |exact value| over agents and states."""
    exact = exact_msq(game).v
    cache = CoalitionValues(game)
    out = {}
    for M in samples:
        sq = []
        for i in range(game.n_agents):
            for s in range(game.n_states):
                for seed in range(seeds):
                    est = mc_msq(game, i, s, M=M, seed=seed, cache=cache)
                    sq.append((est - exact[i, s]) ** 2)
        rmse = math.sqrt(math.fsum(sq) / len(sq))
        out[M] = (rmse, rmse / float(np.max(np.abs(exact))))
    return out


def three_agent_games():
    games = [fixture("g_majority").game]
    seed = 0
    while len(games) < 2:
        g = random_convex_game(seed, max_agents=3)
        if g.n_agents == 3:
            games.append(g)
        seed += 1
    return games


def check_monte_carlo(tol=0.05):
    decreasing, rel, labels = [], [], []
    for game in three_agent_games():
        errs = mc_errors(game)
        rmses = [errs[M][0] for M in MC_SAMPLES]
        decreasing.append(float(not all(a > b for a, b in zip(rmses, rmses[1:]))))
        rel.append(errs[MC_SAMPLES[-1]][1])
        labels.append(f"{game.name} rmse {['%.4g' % r for r in rmses]}")
    return [_report("Monte-Carlo RMSE strictly decreases in M", decreasing, 0.0, labels),
            _report(f"Monte-Carlo relative error at M={MC_SAMPLES[-1]}", rel, tol, labels)]


def shapley_suite():
    return ([check_efficiency_random(), check_permutation_shapley()] + check_dummy_symmetry()
            + check_core() + check_monte_carlo())


# -------------------------------------------------------------------- sbo
def _sbo_games():
    return [f.game for f in all_fixtures()] + [random_convex_game(s) for s in range(5)]


def sbo_suite(tol=1e-8):
    res, ratio, greedy, init, credit, labels = [], [], [], [], [], []
    for game in _sbo_games():
        sol = solve_sboe(game, tol=tol)
        res.append(sol.residual)
        ratio.append(max(0.0, max(sol.ratios, default=0.0) - sol.contraction_factor))
        vi = joint_value_iteration(game, tol=1e-12)
        greedy.append(float(np.sum(sol.joint_greedy != argmax_lowest(vi.q))))
        rng = np.random.default_rng(7)
        starts = [tuple(rng.uniform(-5, 5, (game.n_states, k)) for k in game.actions_per_agent)
                  for _ in range(2)]
        a, b = (solve_sboe(game, tol=tol * 1e-2, init=x) for x in starts)
        init.append(max(np.max(np.abs(qa - qb)) for qa, qb in zip(a.q, b.q)))
        # a residual r leaves the iterate within gamma r / (1 - gamma) of the fixed point
        fine = solve_sboe(game, tol=tol * (1 - game.gamma) * 0.1)
        v_star = np.array(oracle.coalition_value_pi(game, range(game.n_agents)))
        states = np.arange(game.n_states)
        credit.append(max(np.max(np.abs(qi[states, fine.greedy_policy[:, i]] - v_star / game.n_agents))
                          for i, qi in enumerate(fine.q)))
        labels.append(game.name)
    return [_report("SBO residual at termination", res, tol, labels),
            _report("SBO contraction ratio above gamma * max weight sum", ratio, 1e-6, labels),
            _report("SBO greedy joint action differs from joint VI (count)", greedy, 0.0, labels),
            _report("SBO fixed point from two random starts", init, 2e-8, labels),
            _report("SBO equal credit |q_i(a*) - V*/n|", credit, tol, labels)]


# ------------------------------------------------------------------- shaq
def reference_vdn_step(q, visits, tr, gamma, lr_c, lr_d):
    """Additive value-decomposition TD step, written independently of shaq_step."""
    n = len(q)
    if tr.terminal:
        target = tr.reward
    else:
        target = tr.reward + gamma * sum(float(np.max(q[i][tr.s_next])) for i in range(n))
    pred = sum(float(q[i][tr.s, tr.actions[i]]) for i in range(n))
    td = target - pred
    for i in range(n):
        a = tr.actions[i]
        lr = lr_c / (1.0 + lr_d * visits[i][tr.s, a])
        q[i][tr.s, a] = q[i][tr.s, a] + (lr / n) * td
        visits[i][tr.s, a] += 1
    return td


def vdn_bitwise_gap(seeds=5, steps=500):
    """Largest difference between shaq_step in VDN mode and the reference step."""
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        acts, S = (3, 2), 4
        cfg = ShaqConfig(mode="vdn", gamma=0.9, seed=seed)
        st = make_state(S, acts, cfg)
        q = [qi.copy() for qi in st.q]
        visits = [np.zeros_like(v) for v in st.visits]
        for _ in range(steps):
            tr = Transition(int(rng.integers(S)), tuple(int(rng.integers(k)) for k in acts),
                            float(rng.normal()), int(rng.integers(S)), bool(rng.random() < 0.1))
            shaq_step(st, tr)
            reference_vdn_step(q, visits, tr, cfg.gamma, cfg.lr_c, cfg.lr_d)
            for a, b in zip(st.q, q):
                if not np.array_equal(a, b):
                    worst = max(worst, float(np.max(np.abs(a - b))), 1e-300)
    return worst


def shaq_suite(seeds=5):
    out = []
    fails, spread = [], []
    for seed in range(seeds):
        res = run_training("g1", "shaq", seed)
        fails.append(0.0 if res.summary["optimal"] else 1.0)
        q = res.summary["greedy_q"][0]
        spread.append(abs(q[0] - q[1]) / max(abs(q[0]), abs(q[1])))
    labels = [f"seed {s}" for s in range(seeds)]
    out.append(OracleReport("G1 SHAQ non-optimal greedy seeds (need >= 4/5 optimal)",
                            sum(fails), f"failing seeds {[s for s, f in enumerate(fails) if f]}", 1.0))
    out.append(_report("G1 SHAQ relative gap between greedy MSQs", spread, 0.05, labels))
    pp = []
    for seed in range(seeds):
        res = run_training("predator_prey", "shaq", seed)
        pp.append((res.summary["optimal"], res.summary["capture_probability"]))
    out.append(OracleReport("predator-prey SHAQ non-optimal seeds (need >= 4/5)",
                            float(sum(not ok for ok, _ in pp)),
                            f"capture probabilities {[round(p, 4) for _, p in pp]}", 1.0))
    out.append(OracleReport("VDN mode vs reference additive TD step (bitwise)", vdn_bitwise_gap(),
                            "random transitions", 0.0))
    return out


# ------------------------------------------------------------------ pomcg
def check_fully_observable(tol=1e-10):
    devs, labels = [], []
    for fx in all_fixtures():
        game = fx.game
        po = pf.fully_observable(game)
        beliefs = pf.corner_beliefs(po)
        r = posvi(po, beliefs=beliefs, tol=1e-12)
        vi = joint_value_iteration(game, tol=1e-12).v
        pol = pospi(po, beliefs=beliefs, tol=1e-12)
        grand = pol.values[CoalitionMask.grand(game.n_agents).bits]
        nodes = [r.mdp.node(b) for b in beliefs]
        devs.append(np.max(np.abs(r.v[nodes] - vi)))
        labels.append(f"{fx.name} posvi")
        if fx.supermodular:
            devs.append(np.max(np.abs(grand[nodes] - vi)))
            labels.append(f"{fx.name} pospi")
    return _report("fully observable belief MDP vs joint value iteration", devs, tol, labels)


def check_finite_horizon(horizon=5, tol=1e-6):
    devs, labels = [], []
    cases = [(pf.noisy_two_state(), None, 0), (pf.noisy_two_state(), (0,), 1),
             (pf.noisy_two_state(), (1,), 1), (pf.single_agent_tiger(), None, 0)]
    for po, members, tag in cases:
        coalition = None if members is None else CoalitionMask.from_members(members, po.base.n_agents)
        roots = reachable_beliefs(po, horizon, tag, coalition)
        mdp = layered_belief_mdp(po, roots, horizon, tag)
        r = posvi(po, coalition, tol=1e-12, cs_tag=tag, mdp=mdp)
        for b in roots:
            ref = oracle.pomcg_expectimax(po, b.probs, horizon, members, tag)
            devs.append(abs(r.value(b, horizon) - ref))
            labels.append(f"{po.name} coalition {members or 'grand'} belief {np.round(b.probs, 6).tolist()}")
    return _report(f"horizon-{horizon} belief values vs tree expectimax", devs, tol, labels)


def check_pospi_posvi(tol=1e-10):
    devs, labels = [], []
    po = pf.noisy_two_state(iid=True)
    beliefs = closed_beliefs(po)
    r = posvi(po, beliefs=beliefs, tol=tol, cs_tag=0)
    p = pospi(po, beliefs=beliefs, tol=tol, cs_tag=0)
    devs.append(np.max(np.abs(r.v - p.values[CoalitionMask.grand(2).bits])))
    labels.append("noisy i.i.d. closed belief set")
    po = pf.noisy_two_state()
    mdp = layered_belief_mdp(po, reachable_beliefs(po, 3), 3)
    r = posvi(po, tol=tol, mdp=mdp)
    p = pospi(po, tol=tol, mdp=mdp)
    devs.append(np.max(np.abs(r.v - p.values[CoalitionMask.grand(2).bits])))
    labels.append("noisy two-state, horizon 3")
    return _report("POSPI vs POSVI grand values", devs, 2 * tol, labels)


def pomcg_suite():
    return [check_fully_observable(), check_finite_horizon(), check_pospi_posvi()]


# ------------------------------------------------------------------- envs
def check_barriers():
    density = 1.0 / (0.1 * math.sqrt(2.0 * math.pi))
    cases = [("bowl at v_ref vs direct density", fd.barrier_eval("bowl", 1.0), 0.04 - 0.01 * density, 1e-9),
             ("bowl at v_ref vs 1.05772e-4", fd.barrier_eval("bowl", 1.0), 1.05772e-4, 1e-9),
             ("bowl at 1.1", fd.barrier_eval("bowl", 1.1), 0.105, 1e-12),
             ("bowl at 0.9", fd.barrier_eval("bowl", 0.9), 0.105, 1e-12),
             ("l1 at 1.05", fd.barrier_eval("l1", 1.05), 0.05, 1e-12)]
    return [OracleReport(f"barrier {name}", abs(got - want), f"{got!r}", tol) for name, got, want, tol in cases]


def check_voltage_math(n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for _ in range(n):
        v_up = rng.uniform(0.8, 1.2)
        r, x = rng.uniform(0.001, 0.2, 2)
        dp, dq = rng.uniform(-2, 2, 2)
        k = r * dp + x * dq
        if v_up * v_up - 4 * k < 0:
            continue
        v = fd.solve_bus_voltage(v_up, r, x, dp, dq)
        res = abs((v_up - v) * v - k)
        if res > worst:
            worst, where = res, f"v_up={v_up:.4f} K={k:.4f}"
    out = [OracleReport(f"bus-voltage self-consistency on {n} random inputs", worst, where, 1e-12)]
    zero = 0.0
    for _ in range(1000):
        r, x = rng.uniform(0.01, 0.2, 2)
        p_load, p_pv, q_load = rng.uniform(0, 1, 3)
        q = fd.zero_deviation_q(r, x, p_load, p_pv, q_load)
        v = fd.solve_bus_voltage(1.0, r, x, p_load - p_pv, q_load - q)
        zero = max(zero, abs(v - 1.0))
    out.append(OracleReport("zero-deviation reactive power leaves the bus at v0", zero, "random two-bus lines", 1e-9))
    return out


def check_feeder_baselines():
    model, trace = fd.benign_model(), fd.benign_trace()
    droop = fd.FeederSimulator(model, trace).run("droop")
    env = fd.FeederEnv(model, trace, points=fd.BENIGN_POINTS)
    missing = [t for t, a in enumerate(env.best_feasible_policy()) if a is None]
    return [OracleReport("droop control rate shortfall on the shipped trace", 1.0 - droop.control_rate,
                         f"CR {droop.control_rate}", 0.0),
            OracleReport("steps with no in-band grid action (exhaustive search)", float(len(missing)),
                         f"steps {missing[:5]}", 0.0)]


def check_feeder_training(seeds=5):
    rows = []
    for seed in range(seeds):
        s = run_training("feeder", "shaq", seed).summary
        rows.append((s["optimal"], s["control_rate"], s["loss_ratio"]))
    return OracleReport("feeder SHAQ seeds missing CR >= 0.95 and PL <= 1.1 droop (need >= 3/5)",
                        float(sum(not ok for ok, _, _ in rows)),
                        f"(CR, PL/droop) {[(round(c, 3), round(p, 3)) for _, c, p in rows]}", 2.0)


def envs_suite():
    return check_barriers() + check_voltage_math() + check_feeder_baselines() + [check_feeder_training()]


SUITE_FUNCS = {"shapley": shapley_suite, "sbo": sbo_suite, "shaq": shaq_suite,
               "pomcg": pomcg_suite, "envs": envs_suite}


def run_suite(name):
    if name == "all":
        return [r for key in SUITES for r in SUITE_FUNCS[key]()]
    return SUITE_FUNCS[name]()
