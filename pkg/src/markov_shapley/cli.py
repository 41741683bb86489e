"""Command-line entry point: solve, sbo, train, posvi, feeder, verify, run.

Every emitted file starts with the hash of the resolved configuration
(output paths excluded), so identical configs give byte-identical files.
Exit codes: 0 ok, 2 configuration error, 3 solver non-convergence,
4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CapacityError, ConfigError, ContractionError, ImpossibleObservationError,
                     NonConvergenceError)

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_VERIFY = 0, 2, 3, 4
POMDP_FIXTURES = ("noisy_two_state", "noisy_iid", "tiger")
OUTPUT_KEYS = {"out", "out_dir"}


# ---------------------------------------------------------------- helpers
def config_hash(command, options):
    """sha256 of the canonical JSON of a command and its options (outputs excluded)."""
    payload = {"command": command,
               "options": {k: v for k, v in sorted(options.items()) if k not in OUTPUT_KEYS}}
    text = json.dumps(payload, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _plain(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def emit_json(obj, path, chash):
    """JSON with the config hash as its first key."""
    text = json.dumps({"config_hash": chash, **_plain(obj)}, indent=2) + "\n"
    _write(text, path)


def emit_csv(header, rows, path, chash):
    buf = io.StringIO()
    buf.write(f"# config_hash: {chash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    _write(buf.getvalue(), path)


def _write(text, path):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def resolve_game(spec):
    """A fixture name or a path to a game JSON file."""
    from .envs.fixtures import FIXTURES, fixture
    from .mcg import load_game
    if spec in FIXTURES:
        return fixture(spec)
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"{spec!r} is neither a fixture ({sorted(FIXTURES)}) nor an existing file")
    return load_game(path)


def resolve_pomdp(spec):
    from .envs import pomdp_fixtures as pf
    from .pomcg import load_pomcg
    if spec == "noisy_two_state":
        return pf.noisy_two_state()
    if spec == "noisy_iid":
        return pf.noisy_two_state(iid=True)
    if spec == "tiger":
        return pf.single_agent_tiger()
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"{spec!r} is neither a POMDP fixture {POMDP_FIXTURES} nor an existing file")
    return load_pomcg(path)


def _mask_label(mask):
    return "{" + ",".join(str(i) for i in mask.members) + "}"


# --------------------------------------------------------------- commands
def cmd_solve(args):
    from .envs.fixtures import Fixture
    from .mcg import CoalitionValues, all_coalitions
    from .shapley import check_markov_core, exact_msq, verify_fairness
    item = resolve_game(args.game)
    game = item.game if isinstance(item, Fixture) else item
    symmetry = item.symmetry if isinstance(item, Fixture) else None
    cache = CoalitionValues(game, tol=args.tol)
    msv = exact_msq(game, cache)
    core = check_markov_core(game, msv.v, args.core_tol, cache)
    fair = verify_fairness(game, msv, args.core_tol, symmetry, cache)
    worst, _ = core.worst()
    out = {
        "game": game.name,
        "n_agents": game.n_agents,
        "n_states": game.n_states,
        "coalition_values": {_mask_label(c): cache.value(c) for c in all_coalitions(game.n_agents)},
        "msv": msv.v,
        "msq": [qi for qi in msv.q],
        "core": {"in_core": core.in_core, "min_slack": core.min_slack,
                 "worst_coalition": _mask_label(worst), "tol": core.tol},
        "fairness": {"passed": fair.passed, "efficiency": fair.efficiency,
                     "efficiency_gap": float(np.max(fair.efficiency_gap)),
                     "value_efficiency_gap": float(np.max(fair.value_efficiency_gap)),
                     "dummy_agents": list(fair.dummy_agents), "dummy": fair.dummy,
                     "symmetry": fair.symmetry, "symmetry_gap": fair.symmetry_gap},
    }
    emit_json(out, args.out, args.config_hash)
    return EXIT_OK


def cmd_sbo(args):
    from .envs.fixtures import Fixture
    from .sbo import solve_sboe
    item = resolve_game(args.game)
    game = item.game if isinstance(item, Fixture) else item
    if args.gamma_override is not None:
        game = game.with_gamma(args.gamma_override)
    sol = solve_sboe(game, tol=args.tol, max_iters=args.max_iters)
    out = {
        "game": game.name,
        "gamma": game.gamma,
        "q": list(sol.q),
        "residual": sol.residual,
        "iterations": sol.iters,
        "greedy_policy": sol.greedy_policy,
        "joint_greedy": sol.joint_greedy,
        "max_contraction_ratio": max(sol.ratios, default=None),
        "contraction_factor": sol.contraction_factor,
    }
    emit_json(out, args.out, args.config_hash)
    return EXIT_OK


def cmd_train(args):
    from .experiments import run_training
    from .shaq import curve_header
    overrides = dict(eps_start=args.eps_start, eps_end=args.eps_end, anneal_steps=args.anneal_steps,
                     lr_c=args.lr_q, lr_alpha=args.lr_alpha, alpha_max=args.alpha_max,
                     penalty=args.penalty)
    res = run_training(args.env, args.algo, args.seed, args.steps, probe_state=args.probe_state,
                       **overrides)
    rows = [[r.step, r.episode, r.ret, r.epsilon, *r.probe_q] for r in res.records]
    emit_csv(curve_header(res.state), rows, args.out, args.config_hash)
    if args.summary:
        emit_json({"env": args.env, "algo": args.algo, "seed": args.seed, **res.summary},
                  args.summary, args.config_hash)
    return EXIT_OK


def cmd_posvi(args):
    from .mcg import CoalitionMask
    from .pomcg import initial_belief, posvi
    po = resolve_pomdp(args.pomdp)
    beliefs = [initial_belief(po)] if args.horizon is not None else None
    n = po.base.n_agents
    coalition = None if args.coalition is None else CoalitionMask.from_members(args.coalition, n)
    try:
        res = posvi(po, coalition, beliefs=beliefs, tol=args.tol, horizon=args.horizon)
    except CapacityError as exc:
        if args.horizon is not None:
            raise
        raise ConfigError(f"{exc}; the belief set is not finite, pass --horizon") from exc
    greedy = res.greedy()
    nodes = []
    for k in range(res.mdp.n_nodes):
        steps = None if res.mdp.steps_left is None else int(res.mdp.steps_left[k])
        nodes.append({"belief": res.mdp.beliefs[k], "steps_left": steps, "value": float(res.v[k]),
                      "greedy_actions": list(po.base.joint_actions(int(res.actions[greedy[k]])))})
    out = {"pomdp": po.name, "horizon": args.horizon, "tol": args.tol,
           "coalition": list((coalition or CoalitionMask.grand(n)).members),
           "initial_value": res.value(po.initial_state_dist, args.horizon),
           "iterations": res.iterations, "residual": res.residual, "nodes": nodes}
    emit_json(out, args.out, args.config_hash)
    return EXIT_OK


def cmd_feeder(args):
    from .envs import feeder as fd
    if args.buses == 3 and args.trace is None:
        trace = fd.benign_trace()
    elif args.trace is None:
        trace = fd.synthetic_trace(args.buses, steps=max(240, args.episode_len))
    else:
        trace = fd.load_trace(args.trace)
    if trace.p_load.shape[1] != args.buses - 1:
        raise ConfigError(f"trace has {trace.p_load.shape[1]} load columns, expected {args.buses - 1}")
    params = dict(fd.BENIGN_MODEL)
    params.pop("alpha_reward")
    model = fd.FeederModel.chain(args.buses, barrier=args.barrier, alpha_reward=args.alpha_reward, **params)
    run = fd.FeederSimulator(model, trace, args.episode_len).run(args.baseline)
    summary = {"buses": args.buses, "barrier": args.barrier, "baseline": args.baseline,
               "steps": len(run.steps), "CR": run.control_rate, "PL": run.power_loss,
               "total_reward": run.total_reward}
    if args.out_dir is None:
        emit_json(summary, None, args.config_hash)
        return EXIT_OK
    header = (["t"] + [f"v{b}" for b in range(args.buses)]
              + [f"q_pv{b}" for b in model.pv_buses] + ["reward", "in_band"])
    rows = [[t, *step.voltages, *step.q_pv, step.reward, int(step.in_band)]
            for t, step in enumerate(run.steps)]
    out_dir = Path(args.out_dir)
    emit_csv(header, rows, out_dir / "feeder_steps.csv", args.config_hash)
    emit_json(summary, out_dir / "feeder_summary.json", args.config_hash)
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_suite
    reports = run_suite(args.suite)
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    if args.out:
        emit_json({"suite": args.suite, "reports": [
            {"target": r.target, "max_abs_deviation": r.max_abs_deviation if math.isfinite(r.max_abs_deviation)
             else str(r.max_abs_deviation), "worst_case": r.worst_case, "tolerance": r.tolerance,
             "passed": r.passed} for r in reports]}, args.out, args.config_hash)
    return EXIT_VERIFY if failed else EXIT_OK


# ----------------------------------------------------------------- config
RUN_ORDER = ("solve", "sbo", "posvi", "train", "feeder", "verify")
OUTPUT_NAMES = {"solve": "solve.json", "sbo": "sbo.json", "posvi": "posvi.json", "train": "curve.csv",
                "verify": "verify.json"}


@dataclass
class ExperimentConfig:
    """A TOML experiment: one table per subcommand plus shared settings.

    Top-level keys: ``seed`` (used by train unless it sets its own),
    ``output_dir`` and ``tol`` (default tolerance for sections that take one).
    """

    sections: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "."
    tol: float = None

    @classmethod
    def from_dict(cls, data, parser):
        data = dict(data)
        top = {k: data.pop(k) for k in ("seed", "output_dir", "tol") if k in data}
        unknown = [k for k in data if k not in RUN_ORDER]
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; allowed sections {list(RUN_ORDER)} "
                              f"and seed/output_dir/tol")
        sections = {}
        for name, values in data.items():
            if not isinstance(values, dict):
                raise ConfigError(f"[{name}] must be a table")
            allowed = _section_keys(parser, name) - OUTPUT_KEYS
            bad = [k for k in values if k.replace("-", "_") not in allowed]
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {bad}; allowed {sorted(allowed)}")
            sections[name] = {k.replace("-", "_"): _coerce(parser, name, k.replace("-", "_"), v)
                              for k, v in values.items()}
        cfg = cls(sections, int(top.get("seed", 0)), str(top.get("output_dir", ".")), top.get("tol"))
        return cfg


def _coerce(parser, name, key, value):
    """Apply the flag's type and choices to a config value."""
    action = next(a for a in _subparser(parser, name)._actions if a.dest == key)
    try:
        if action.nargs in ("+", "*"):
            if not isinstance(value, list):
                raise ValueError("expected a list")
            value = [action.type(v) if action.type else v for v in value]
        elif action.nargs == 0:
            if not isinstance(value, bool):
                raise ValueError("expected true or false")
        else:
            if isinstance(value, (list, dict, bool)):
                raise ValueError("expected a scalar")
            value = action.type(value) if action.type is not None else str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {key} = {value!r}: {exc}") from exc
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"[{name}] {key} must be one of {list(action.choices)}, got {value!r}")
    return value


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise ConfigError(f"unknown subcommand {name!r}")


def _section_keys(parser, name):
    sub = _subparser(parser, name)
    return {a.dest for a in sub._actions if a.dest not in ("help",)} - {"func"}


def load_config(path):
    try:
        import tomllib
    except ModuleNotFoundError:   # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def cmd_run(args, parser):
    cfg = ExperimentConfig.from_dict(load_config(args.config), parser)
    out_dir = Path(cfg.output_dir)
    if not out_dir.is_absolute():
        out_dir = Path(args.config).resolve().parent / out_dir
    status = EXIT_OK
    for name in RUN_ORDER:
        if name not in cfg.sections:
            continue
        ns = _subparser(parser, name).parse_args(_required_argv(parser, name, cfg.sections[name]))
        ns.command = name
        values = dict(cfg.sections[name])
        if "seed" in _section_keys(parser, name):
            values.setdefault("seed", cfg.seed)
        if cfg.tol is not None and "tol" in _section_keys(parser, name):
            values.setdefault("tol", cfg.tol)
        for k, v in values.items():
            setattr(ns, k, v)
        if name == "feeder":
            ns.out_dir = str(out_dir)
        elif name in OUTPUT_NAMES:
            ns.out = str(out_dir / OUTPUT_NAMES[name])
        code = dispatch(ns)
        status = max(status, code)
    return status


def _required_argv(parser, name, values):
    """Placeholder argv so argparse fills defaults; values are set afterwards."""
    argv = []
    for a in _subparser(parser, name)._actions:
        if a.required and a.option_strings:
            if a.dest not in values:
                raise ConfigError(f"[{name}] needs {a.dest}")
            argv += [a.option_strings[-1], str(values[a.dest])]
    return argv


# ----------------------------------------------------------------- parser
def build_parser():
    from .experiments import ENV_NAMES
    p = argparse.ArgumentParser(prog="markov-shapley",
                                description="Markov Shapley values, the Shapley-Bellman operator, "
                                            "SHAQ and belief-space solvers.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="coalition values, MSV/MSQ, core and fairness report")
    s.add_argument("--game", required=True, help="fixture name or game JSON path")
    s.add_argument("--tol", type=float, default=1e-10, help="value-iteration tolerance")
    s.add_argument("--core-tol", type=float, default=1e-8, help="tolerance of core/fairness checks")
    s.add_argument("--out", help="output JSON path (stdout if omitted)")

    s = sub.add_parser("sbo", help="solve the Shapley-Bellman optimality equation")
    s.add_argument("--game", required=True, help="fixture name or game JSON path")
    s.add_argument("--gamma-override", type=float, help="replace the game's discount factor")
    s.add_argument("--tol", type=float, default=1e-8, help="stop when the residual is below this")
    s.add_argument("--max-iters", type=int, default=100_000, help="iteration cap")
    s.add_argument("--out", help="output JSON path (stdout if omitted)")

    s = sub.add_parser("train", help="tabular SHAQ or VDN training, emits a learning curve CSV")
    s.add_argument("--env", required=True, choices=ENV_NAMES, help="environment name")
    s.add_argument("--algo", choices=("shaq", "vdn"), default="shaq", help="update rule")
    s.add_argument("--steps", type=int, help="environment steps (per-environment default)")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--eps-start", type=float, help="initial exploration rate")
    s.add_argument("--eps-end", type=float, help="final exploration rate")
    s.add_argument("--anneal-steps", type=int, help="steps of linear epsilon annealing")
    s.add_argument("--lr-q", type=float, help="learning-rate scale c in c/(1 + d visits)")
    s.add_argument("--lr-alpha", type=float, help="step size of the alpha update")
    s.add_argument("--alpha-max", type=float, help="upper clamp of alpha")
    s.add_argument("--penalty", type=float, default=-1.0, help="predator-prey lone-capture penalty")
    s.add_argument("--probe-state", type=int, default=0, help="state whose Q-values go in the curve")
    s.add_argument("--out", help="curve CSV path (stdout if omitted)")
    s.add_argument("--summary", help="optional JSON path for the greedy-policy evaluation")

    s = sub.add_parser("posvi", help="belief-space Shapley value iteration")
    s.add_argument("--pomdp", required=True, help=f"POMDP fixture {POMDP_FIXTURES} or JSON path")
    s.add_argument("--horizon", type=int, help="finite horizon (closed belief set if omitted)")
    s.add_argument("--tol", type=float, default=1e-10, help="value-iteration tolerance")
    s.add_argument("--coalition", type=int, nargs="+", help="member agents (grand coalition if omitted)")
    s.add_argument("--out", help="output JSON path (stdout if omitted)")

    s = sub.add_parser("feeder", help="run a baseline controller on the radial feeder")
    s.add_argument("--buses", type=int, default=3, help="number of buses including the slack bus")
    s.add_argument("--barrier", choices=("l1", "l2", "bowl"), default="bowl", help="voltage barrier")
    s.add_argument("--baseline", choices=("droop", "none"), default="droop", help="controller")
    s.add_argument("--trace", help="trace CSV (shipped benign trace for 3 buses if omitted)")
    s.add_argument("--episode-len", type=int, default=240, help="steps per episode")
    s.add_argument("--alpha-reward", type=float, default=0.1, help="reactive-power penalty weight")
    s.add_argument("--out-dir", help="directory for feeder_steps.csv and feeder_summary.json")

    s = sub.add_parser("verify", help="run the oracle cross-check suites")
    s.add_argument("--suite", choices=("all", "shapley", "sbo", "shaq", "pomcg", "envs"), default="all",
                   help="which suite to run")
    s.add_argument("--out", help="optional JSON report path")

    s = sub.add_parser("run", help="run every section of a TOML experiment config")
    s.add_argument("--config", required=True, help="TOML config path")
    return p


COMMANDS = {"solve": cmd_solve, "sbo": cmd_sbo, "train": cmd_train, "posvi": cmd_posvi,
            "feeder": cmd_feeder, "verify": cmd_verify}


def dispatch(ns):
    options = {k: v for k, v in vars(ns).items() if k not in ("command", "config_hash")}
    ns.config_hash = config_hash(ns.command, options)
    return COMMANDS[ns.command](ns)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args, parser)
        return dispatch(args)
    except NonConvergenceError as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ConfigError, ContractionError, CapacityError, ImpossibleObservationError, KeyError) as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
