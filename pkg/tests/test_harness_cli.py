import csv
import json

import numpy as np
import pytest

from qam import cli, harness
from qam.data import ReplayBuffer
from qam.envs import GaussTiltBandit, PointMaze2D
from qam.harness import RunConfig, evaluate, read_metrics, run_offline, run_online
from qam.nn import ConfigurationError, seeded_rng


def tiny(tmp_path, **kw):
    base = dict(hidden=(16, 16), K=2, T=4, batch_size=16, offline_steps=20, online_steps=10, log_interval=5,
                eval_interval=10, eval_episodes=2, dataset_size=300, out_dir=str(tmp_path / "run"))
    base.update(kw)
    return RunConfig(**base)


def strip_wall(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    col = rows[0].index("wall_ms")
    return [r[:col] + r[col + 1:] for r in rows]


class ZeroAgent:
    def act(self, s, rng, deterministic=False):
        return np.zeros(2)


# -- configuration ------------------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(tau=-1.0), dict(gamma=1.0), dict(gamma=0.0), dict(T=1), dict(K=0),
                                 dict(kind="sac"), dict(dataset="/nonexistent.dat"), dict(critic="analytic"),
                                 dict(env="cartpole")])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigurationError):
        RunConfig(**bad)


def test_config_round_trip(tmp_path):
    cfg = RunConfig(tau=2.0, hidden=(8, 8), env="gauss-bandit", env_kwargs={"b": [1.0, 0.0]})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.from_json(path) == cfg
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"taus": 1.0})


def test_metric_columns_are_fixed_per_kind():
    cols = harness.metric_columns("qam-edit")
    assert cols[:2] == ["step", "wall_ms"] and cols[-4:] == harness.EVAL_COLUMNS
    assert "edit_entropy" in cols and "onestep_loss" not in cols


# -- offline --------------------------------------------------------------------------


def test_zero_steps_writes_header_and_checkpoint(tmp_path):
    out = run_offline(tiny(tmp_path, offline_steps=0))
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines == [",".join(harness.metric_columns("qam"))]
    assert (out / "checkpoint.bin").is_file()


def test_offline_runs_are_deterministic(tmp_path):
    a = run_offline(tiny(tmp_path, out_dir=str(tmp_path / "a"), kind="qam-edit"))
    b = run_offline(tiny(tmp_path, out_dir=str(tmp_path / "b"), kind="qam-edit"))
    assert strip_wall(a / "metrics.csv") == strip_wall(b / "metrics.csv")
    rows = read_metrics(a / "metrics.csv")
    assert [r["step"] for r in rows] == [5, 10, 15, 20]
    assert rows[1]["eval_success"] is not None and rows[0]["eval_success"] is None


def test_eval_episode_count_does_not_perturb_training(tmp_path):
    a = run_offline(tiny(tmp_path, out_dir=str(tmp_path / "a"), eval_episodes=1))
    b = run_offline(tiny(tmp_path, out_dir=str(tmp_path / "b"), eval_episodes=3))
    drop = harness.EVAL_COLUMNS
    ra, rb = read_metrics(a / "metrics.csv"), read_metrics(b / "metrics.csv")
    for x, y in zip(ra, rb):
        assert {k: v for k, v in x.items() if k not in drop and k != "wall_ms"} == \
               {k: v for k, v in y.items() if k not in drop and k != "wall_ms"}


def test_checkpoint_restores_agent(tmp_path):
    cfg = tiny(tmp_path)
    out = run_offline(cfg)
    agent, cfg2, env = harness.load_agent(out / "checkpoint.bin")
    assert cfg2 == cfg and agent.steps == 20
    a = agent.act(np.array([0.2, 0.5]), seeded_rng(0), deterministic=True)
    assert a.shape == (2,)


# -- evaluation --------------------------------------------------------------------


def test_evaluate_zero_reward_env():
    env = PointMaze2D(max_steps=5)
    res = evaluate(ZeroAgent(), env, 3, seed=0)
    assert res == {"eval_return": 0.0, "eval_ci_low": 0.0, "eval_ci_high": 0.0, "eval_success": 0.0}


def test_evaluate_bandit_optimum():
    env = GaussTiltBandit(b=[0.0, 0.0], C=[2.0, 2.0])
    assert evaluate(ZeroAgent(), env, 4, seed=1)["eval_return"] == 0.0


def test_evaluate_single_episode_ci_collapses():
    class Step:
        def act(self, s, rng, deterministic=False):
            return np.array([1.0, 0.0])

    res = evaluate(Step(), GaussTiltBandit(b=[0.5, 0.0]), 1, seed=0)
    assert res["eval_ci_low"] == res["eval_ci_high"] == res["eval_return"] == 0.5


def test_bootstrap_ci_brackets_mean():
    vals = np.arange(10.0)
    lo, hi = harness.bootstrap_ci(vals, seeded_rng(0))
    assert lo < vals.mean() < hi


# -- online -----------------------------------------------------------------------------


def test_online_zero_steps_equals_checkpoint_eval(tmp_path):
    cfg = tiny(tmp_path)
    ck = run_offline(cfg) / "checkpoint.bin"
    out = run_online(tiny(tmp_path, online_steps=0, out_dir=str(tmp_path / "on")), ck)
    rows = read_metrics(out / "metrics.csv")
    assert len(rows) == 1 and rows[0]["step"] == 0
    agent, _, env = harness.load_agent(ck)
    expected = evaluate(agent, env, cfg.eval_episodes, cfg.seed)
    assert {k: rows[0][k] for k in expected} == expected


def test_online_run_logs_and_is_deterministic(tmp_path):
    ck = run_offline(tiny(tmp_path)) / "checkpoint.bin"
    a = run_online(tiny(tmp_path, out_dir=str(tmp_path / "a")), ck)
    b = run_online(tiny(tmp_path, out_dir=str(tmp_path / "b")), ck)
    assert strip_wall(a / "metrics.csv") == strip_wall(b / "metrics.csv")
    assert [r["step"] for r in read_metrics(a / "metrics.csv")] == [0, 5, 10]


def test_buffer_holds_min_of_steps_and_capacity():
    env = PointMaze2D()
    for cap, k in ((50, 30), (20, 30)):
        buf = ReplayBuffer(2, 2, cap)
        stepper = harness._EnvStepper(env, buf, seeded_rng(0), seeded_rng(1))

        class Rand:
            def act(self, s, rng, deterministic=False):
                return rng.uniform(-1, 1, 2)

        for _ in range(k):
            stepper(Rand())
        assert len(buf) == min(k, cap)


def test_collapse_guard():
    guard = harness._CollapseGuard(window=10)
    for i in range(10):
        guard.check({"skipped": float(i % 2)}, i)
    with pytest.raises(harness.TrainingCollapse):
        for i in range(10):
            guard.check({"skipped": 1.0}, i)


# -- command line -------------------------------------------------------------------------


def test_cli_oracle_tilt(capsys):
    assert cli.main(["oracle", "tilt", "--mu", "0,0", "--sigma", "1,1", "--tau", "1", "--b", "1,0"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["mean 1,0", "var 1,1"]


def test_cli_oracle_dp(capsys):
    assert cli.main(["oracle", "dp"]) == 0
    assert 0.0 < float(capsys.readouterr().out.split()[1]) < 1.0


def test_cli_gen_data_is_deterministic(tmp_path):
    a, b = tmp_path / "a.dat", tmp_path / "b.dat"
    for p in (a, b):
        assert cli.main(["gen-data", "--env", "point-maze", "--n", "50000", "--seed", "7", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_unknown_flag_and_bad_values(tmp_path, capsys):
    assert cli.main(["train-offline", "--bogus", "1"]) == 2
    assert "usage" in capsys.readouterr().err
    assert cli.main(["train-offline", "--gamma", "1.5", "--out-dir", str(tmp_path)]) == 2
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.bin")]) == 2


def test_cli_train_eval_export(tmp_path, capsys):
    data = tmp_path / "d.dat"
    assert cli.main(["gen-data", "--n", "300", "--out", str(data)]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"hidden": [8, 8], "K": 2, "T": 3, "batch_size": 8, "eval_episodes": 1}))
    out = tmp_path / "run"
    assert cli.main(["train-offline", "--config", str(cfg), "--dataset", str(data), "--steps", "0",
                     "--out-dir", str(out)]) == 0
    assert cli.main(["train-offline", "--config", str(cfg), "--dataset", str(data), "--steps", "4",
                     "--eval-interval", "2", "--out-dir", str(out)]) == 0
    assert len(read_metrics(out / "metrics.csv")) == 2
    assert cli.main(["train-online", "--config", str(cfg), "--dataset", str(data), "--steps", "2",
                     "--checkpoint", str(out / "checkpoint.bin"), "--out-dir", str(tmp_path / "on")]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--episodes", "1"]) == 0
    assert "eval_success" in capsys.readouterr().out
    assert cli.main(["export-csv", "--dataset", str(data), "--out", str(tmp_path / "d.csv")]) == 0


def test_cli_collapse_exit_code(monkeypatch, tmp_path):
    def boom(config):
        raise harness.TrainingCollapse("skipped")

    monkeypatch.setattr(harness, "run_offline", boom)
    assert cli.main(["train-offline", "--out-dir", str(tmp_path)]) == 3
