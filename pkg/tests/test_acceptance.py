"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. The status lines are
written straight to the terminal so they show up without ``-s``.
"""
import time

import pytest

from markov_shapley import verify
from markov_shapley.cli import main
from markov_shapley.envs.fixtures import random_convex_game
from markov_shapley.experiments import DEFAULT_STEPS


@pytest.fixture
def report(capsys):
    def _report(number, title, reports, extra_ok=True, note=""):
        ok = extra_ok and all(r.passed for r in reports)
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title}{note}")
            for r in reports:
                print("    " + r.line())
        assert ok, f"criterion {number} failed"
    return _report


def test_criterion_01_efficiency(report):
    for seed in range(verify.N_RANDOM_GAMES):
        g = random_convex_game(seed)
        assert g.n_agents <= 4 and g.n_states <= 5 and max(g.actions_per_agent) <= 3
    t0 = time.perf_counter()
    rep = verify.check_efficiency_random(n_games=20, tol=1e-8)
    elapsed = time.perf_counter() - t0
    report(1, "efficiency on 20 random convex games", [rep], elapsed < 30.0, f" ({elapsed:.1f} s, limit 30 s)")


def test_criterion_02_dummy_symmetry(report):
    report(2, "dummy and symmetry", verify.check_dummy_symmetry(tol=1e-10))


def test_criterion_03_core(report):
    report(3, "Markov core membership", verify.check_core(tol=1e-8))


def test_criterion_04_sbo_convergence(report):
    reps = verify.sbo_suite(tol=1e-8)
    report(4, "SBO convergence", [r for r in reps if "equal credit" not in r.target])


def test_criterion_05_equal_credit(report):
    reps = verify.sbo_suite(tol=1e-8)
    report(5, "equal credit", [r for r in reps if "equal credit" in r.target])


def test_criterion_06_shaq_learning(report):
    budgets_ok = (DEFAULT_STEPS.get("g1", 10_000) <= 50_000 and DEFAULT_STEPS["predator_prey"] <= 50_000)
    report(6, "SHAQ learning on G1 and predator-prey, VDN bitwise", verify.shaq_suite(seeds=5), budgets_ok)


def test_criterion_07_monte_carlo(report):
    report(7, "Monte-Carlo Shapley convergence", verify.check_monte_carlo(tol=0.05))


def test_criterion_08_pomcg(report):
    report(8, "POSVI/POSPI", verify.pomcg_suite())


def test_criterion_09_voltage_math(report):
    report(9, "voltage math", verify.check_barriers() + verify.check_voltage_math(n=10_000))


def test_criterion_10_feeder(report):
    assert DEFAULT_STEPS["feeder"] <= 100_000
    t0 = time.perf_counter()
    reps = verify.check_feeder_baselines() + [verify.check_feeder_training(seeds=5)]
    elapsed = time.perf_counter() - t0
    report(10, "feeder end to end", reps, elapsed < 600.0, f" ({elapsed:.1f} s, limit 600 s)")


def test_criterion_11_verify_all(report, capsys):
    code = main(["verify", "--suite", "all"])
    out = capsys.readouterr().out
    fails = [line for line in out.splitlines() if line.startswith("[FAIL]")]
    with capsys.disabled():
        print(f"\n{'PASS' if code == 0 else 'FAIL'} criterion 11: verify --suite all exits {code}"
              f" ({len(fails)} failing checks)")
    assert code == 0
