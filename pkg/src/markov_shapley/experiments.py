"""Named training setups shared by the CLI, the verify suites and the tests.

Each setup fixes the environment, the learner defaults and how a trained
greedy policy is judged, so that every entry point trains the same thing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs.base import GameEnv
from .envs.feeder import BENIGN_POINTS, FeederEnv, FeederSimulator, benign_model, benign_trace
from .envs.fixtures import FIXTURES, fixture
from .envs.predator_prey import GridPredatorPrey
from .errors import ConfigError
from .mcg import joint_value_iteration
from .shaq import ShaqConfig, extract_policy, make_state, train

ENV_NAMES = tuple(FIXTURES) + ("predator_prey", "feeder")

# Per-environment learner defaults; anything not listed uses ShaqConfig's.
ENV_DEFAULTS = {
    "predator_prey": dict(anneal_steps=25_000),
    "feeder": dict(anneal_steps=50_000, lr_alpha=0.01),
}
DEFAULT_STEPS = {"predator_prey": 50_000, "feeder": 100_000}
GAME_HORIZON = 50   # episode length for multi-state fixture games


def make_env(name, penalty=-1.0):
    """Environment by name: a fixture game, ``predator_prey`` or ``feeder``."""
    if name in FIXTURES:
        game = fixture(name).game
        horizon = 1 if game.n_states == 1 else GAME_HORIZON
        return GameEnv(game, horizon=horizon, terminal_at_horizon=game.n_states == 1)
    if name == "predator_prey":
        return GridPredatorPrey(penalty=penalty)
    if name == "feeder":
        return FeederEnv(benign_model(), benign_trace(), points=BENIGN_POINTS)
    raise ConfigError(f"unknown environment {name!r}; choose from {list(ENV_NAMES)}")


def make_config(name, env, mode="shaq", seed=0, **overrides):
    kw = dict(mode=mode, gamma=env.gamma, seed=seed)
    kw.update(ENV_DEFAULTS.get(name, {}))
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if mode == "vdn":
        kw["lr_alpha"] = 0.0
    try:
        return ShaqConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class TrainResult:
    env_name: str
    state: object
    records: list
    summary: dict


def evaluate_greedy(name, env, state):
    """Summary of the greedy policy; ``optimal`` says whether it is judged optimal."""
    policy = extract_policy(state)
    if name in FIXTURES:
        game = env.game
        q_star = joint_value_iteration(game, tol=1e-12).q
        chosen = np.array([game.joint_index(policy[s]) for s in range(game.n_states)])
        states = np.arange(game.n_states)
        gap = float(np.max(q_star.max(axis=1) - q_star[states, chosen]))
        greedy_q = [[float(qi[s, policy[s, i]]) for i, qi in enumerate(state.q)] for s in states]
        return dict(optimal=gap <= 1e-9, value_gap=gap, greedy_q=greedy_q,
                    policy=policy.tolist())
    if name == "predator_prey":
        best = env.capture_probability()
        got = env.capture_probability(policy)
        return dict(optimal=got >= 0.9 * best, capture_probability=got, optimal_capture=best)
    if name == "feeder":
        cr, pl = env.evaluate(policy)
        droop = FeederSimulator(env.model, env.trace, env.episode_len).run("droop")
        ratio = pl / droop.power_loss
        return dict(optimal=cr >= 0.95 and ratio <= 1.1, control_rate=cr, power_loss=pl,
                    droop_power_loss=droop.power_loss, loss_ratio=ratio)
    raise ConfigError(f"unknown environment {name!r}")


def run_training(name, mode="shaq", seed=0, steps=None, evaluate=True, probe_state=0, **overrides):
    env = make_env(name, penalty=overrides.pop("penalty", -1.0))
    config = make_config(name, env, mode, seed, **overrides)
    state = make_state(env.n_states, env.actions_per_agent, config)
    steps = DEFAULT_STEPS.get(name, 10_000) if steps is None else int(steps)
    state, records = train(env, state, steps, probe_state=probe_state)
    summary = evaluate_greedy(name, env, state) if evaluate and steps > 0 else {}
    return TrainResult(name, state, records, summary)
