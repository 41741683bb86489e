import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from markov_shapley import cli
from markov_shapley.cli import build_parser, config_hash, main
from markov_shapley.oracle import OracleReport


def read_json(path):
    return json.loads(path.read_text())


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash: ")
    return lines[0].split(": ")[1], list(csv.reader(lines[1:]))


# ----------------------------------------------------------------- solve
def test_solve_g1_file(tmp_path, fixture_dir):
    out = tmp_path / "s.json"
    assert main(["solve", "--game", f"{fixture_dir}/g1.json", "--out", str(out)]) == 0
    data = read_json(out)
    assert list(data)[0] == "config_hash"
    assert np.allclose(np.array(data["msv"])[:, 0], [1.5, 2.5], atol=1e-12)
    assert data["core"]["in_core"] and data["fairness"]["passed"]
    assert data["coalition_values"]["{0,1}"] == pytest.approx([4.0])


def test_solve_majority_reports_not_in_core(tmp_path):
    out = tmp_path / "m.json"
    assert main(["solve", "--game", "g_majority", "--out", str(out)]) == 0
    core = read_json(out)["core"]
    assert not core["in_core"] and core["min_slack"] == pytest.approx(-1 / 3)


def test_solve_to_stdout(capsys):
    assert main(["solve", "--game", "g_dummy"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["fairness"]["dummy_agents"] == [0]


def test_unknown_game_is_config_error(capsys):
    assert main(["solve", "--game", "does_not_exist"]) == 2
    assert "neither a fixture" in capsys.readouterr().err


def test_bad_game_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["solve", "--game", str(bad)]) == 2


# ------------------------------------------------------------------- sbo
def test_sbo_g1(tmp_path):
    out = tmp_path / "sbo.json"
    assert main(["sbo", "--game", "g1", "--out", str(out)]) == 0
    data = read_json(out)
    assert data["q"][0][0][1] == pytest.approx(2.0) and data["q"][1][0][1] == pytest.approx(2.0)
    assert data["residual"] <= 1e-8


def test_sbo_gamma_override(tmp_path):
    out = tmp_path / "sbo.json"
    assert main(["sbo", "--game", "g4", "--gamma-override", "0.5", "--out", str(out)]) == 0
    assert read_json(out)["gamma"] == 0.5


def test_sbo_non_convergence_exit_code():
    assert main(["sbo", "--game", "g4", "--max-iters", "2", "--out", "-"]) == 3


def test_sbo_bad_gamma_is_config_error():
    assert main(["sbo", "--game", "g4", "--gamma-override", "1.5"]) == 2


# ----------------------------------------------------------------- train
def test_train_zero_steps_header(tmp_path):
    out = tmp_path / "c.csv"
    assert main(["train", "--env", "g1", "--algo", "vdn", "--steps", "0", "--out", str(out)]) == 0
    _, rows = read_csv(out)
    assert rows == [["step", "episode", "return", "epsilon", "q0_a0", "q0_a1", "q1_a0", "q1_a1"]]


def test_train_curve_and_summary(tmp_path):
    out, summ = tmp_path / "c.csv", tmp_path / "s.json"
    assert main(["train", "--env", "g1", "--steps", "3000", "--seed", "2", "--out", str(out),
                 "--summary", str(summ)]) == 0
    h1, rows = read_csv(out)
    assert len(rows) == 3001 and rows[-1][0] == "3000"
    s = read_json(summ)
    assert s["config_hash"] == h1 and s["optimal"] and s["policy"] == [[1, 1]]


def test_train_byte_identical(tmp_path):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        assert main(["train", "--env", "g4", "--steps", "2000", "--seed", "5", "--out", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_hash_depends_on_config(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["train", "--env", "g1", "--steps", "0", "--seed", "1", "--out", str(a)])
    main(["train", "--env", "g1", "--steps", "0", "--seed", "2", "--out", str(b)])
    assert read_csv(a)[0] != read_csv(b)[0]


def test_train_invalid_option():
    assert main(["train", "--env", "g1", "--alpha-max", "0.5", "--steps", "0"]) == 2


def test_train_unknown_env():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--env", "nowhere"])
    assert exc.value.code == 2


# ----------------------------------------------------------------- posvi
def test_posvi_horizon(tmp_path):
    out = tmp_path / "p.json"
    assert main(["posvi", "--pomdp", "noisy_two_state", "--horizon", "3", "--out", str(out)]) == 0
    data = read_json(out)
    from markov_shapley import oracle
    from markov_shapley.envs.pomdp_fixtures import noisy_two_state
    po = noisy_two_state()
    assert data["initial_value"] == pytest.approx(oracle.pomcg_expectimax(po, po.initial_state_dist, 3),
                                                  abs=1e-8)


def test_posvi_closed_and_coalition(tmp_path, fixture_dir):
    out = tmp_path / "p.json"
    assert main(["posvi", "--pomdp", f"{fixture_dir}/noisy_iid.json", "--coalition", "0",
                 "--out", str(out)]) == 0
    data = read_json(out)
    assert data["coalition"] == [0] and data["horizon"] is None


def test_posvi_open_set_needs_horizon(capsys):
    assert main(["posvi", "--pomdp", "noisy_two_state"]) == 2
    assert "--horizon" in capsys.readouterr().err


# ---------------------------------------------------------------- feeder
def test_feeder_outputs_reproduce_metrics(tmp_path):
    assert main(["feeder", "--out-dir", str(tmp_path)]) == 0
    summary = read_json(tmp_path / "feeder_summary.json")
    chash, rows = read_csv(tmp_path / "feeder_steps.csv")
    assert summary["config_hash"] == chash
    header, body = rows[0], rows[1:]
    assert header == ["t", "v0", "v1", "v2", "q_pv1", "q_pv2", "reward", "in_band"]
    assert len(body) == 240 == summary["steps"]
    flags = [int(r[-1]) for r in body]
    assert summary["CR"] == pytest.approx(np.mean(flags)) == 1.0
    # recompute per-step loss from voltages and injections
    from markov_shapley.envs import feeder as fd
    model, trace = fd.benign_model(), fd.benign_trace()
    losses = []
    for r in body:
        t = int(r[0])
        v = [float(x) for x in r[1:4]]
        q = np.array([float(x) for x in r[4:6]])
        p_load, q_load, p_pv = trace.row(t)
        net_p, net_q = p_load - p_pv, q_load - q
        dp, dq = np.cumsum(net_p[::-1])[::-1], np.cumsum(net_q[::-1])[::-1]
        losses.append(sum(rk * (a * a + b * b) / (vs * vs) for rk, a, b, vs in zip(model.r, dp, dq, v[:2])))
    assert summary["PL"] == pytest.approx(np.mean(losses), rel=1e-12)


def test_feeder_no_baseline_to_stdout(capsys):
    assert main(["feeder", "--baseline", "none", "--barrier", "l1"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["CR"] < 1.0 and data["baseline"] == "none"


def test_feeder_other_bus_count(capsys):
    assert main(["feeder", "--buses", "4", "--episode-len", "60"]) == 0
    assert json.loads(capsys.readouterr().out)["steps"] <= 60


def test_feeder_trace_mismatch(tmp_path):
    from markov_shapley.envs import feeder as fd
    path = tmp_path / "t.csv"
    fd.save_trace(fd.synthetic_trace(5), path)
    assert main(["feeder", "--buses", "3", "--trace", str(path)]) == 2


def test_feeder_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["feeder", "--out-dir", str(a)])
    main(["feeder", "--out-dir", str(b)])
    for name in ("feeder_steps.csv", "feeder_summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


# ---------------------------------------------------------------- verify
def test_verify_pomcg_suite(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["verify", "--suite", "pomcg", "--out", str(out)]) == 0
    assert "checks passed" in capsys.readouterr().out
    assert all(r["passed"] for r in read_json(out)["reports"])


def test_verify_failure_exit_code(monkeypatch):
    import markov_shapley.verify as verify
    monkeypatch.setattr(verify, "run_suite", lambda name: [OracleReport("forced", 1.0, "x", 0.0)])
    assert main(["verify", "--suite", "sbo"]) == 4


# ------------------------------------------------------------------- run
def test_run_config(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text('seed = 3\noutput_dir = "out"\n\n[solve]\ngame = "g1"\n\n'
                   '[train]\nenv = "g1"\nsteps = 200\nalgo = "vdn"\n\n[feeder]\nbarrier = "l2"\n')
    assert main(["run", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert read_json(out / "solve.json")["msv"][0][0] == pytest.approx(1.5)
    _, rows = read_csv(out / "curve.csv")
    assert len(rows) == 201
    assert read_json(out / "feeder_summary.json")["barrier"] == "l2"
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(["run", "--config", str(cfg)]) == 0
    assert first == {p.name: p.read_bytes() for p in out.iterdir()}


def test_run_config_hash_matches_direct_call(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text('[train]\nenv = "g1"\nsteps = 0\n')
    main(["run", "--config", str(cfg)])
    direct = tmp_path / "direct.csv"
    main(["train", "--env", "g1", "--steps", "0", "--out", str(direct)])
    assert (tmp_path / "curve.csv").read_bytes() == direct.read_bytes()


@pytest.mark.parametrize("text", [
    'bogus = 1\n',
    '[train]\nenv = "g1"\nwhatever = 2\n',
    '[train]\nenv = "g1"\nout = "x.csv"\n',
    '[train]\nenv = "nowhere"\n',
    '[train]\nenv = "g1"\nsteps = "many"\n',
    '[sbo]\ntol = 1e-8\n',
    '[solve]\ngame = [1, 2]\n',
    'not toml at all [[[',
])
def test_run_config_rejects_bad_schema(tmp_path, text):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(text)
    assert main(["run", "--config", str(cfg)]) == 2


# ------------------------------------------------------------------ misc
def test_help_documents_every_flag():
    parser = build_parser()
    for name in ("solve", "sbo", "train", "posvi", "feeder", "verify", "run"):
        sub = cli._subparser(parser, name)
        text = sub.format_help()
        for action in sub._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, f"{name} {action.option_strings} lacks help"
                assert action.option_strings[-1] in text


def test_config_hash_ignores_output_paths():
    a = config_hash("train", {"env": "g1", "out": "a.csv"})
    b = config_hash("train", {"env": "g1", "out": "b.csv"})
    c = config_hash("train", {"env": "g4", "out": "a.csv"})
    assert a == b != c and len(a) == 16


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "markov_shapley", "solve", "--game", "g1"],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["msv"][0][0] == pytest.approx(1.5)
