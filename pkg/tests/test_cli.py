import json
import os

import numpy as np
import pytest

from armstm.cli import (
    CliError, _merge, _parse_goal_at, load_config, main, write_csv,
)
from armstm.stm import load_checkpoint, load_dataset


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny but complete CLI pipeline run once and shared by the tests."""
    d = tmp_path_factory.mktemp("cli")
    cfg = {
        "stm": {"iterations": 40, "layers": 1, "hidden": 8, "mixtures": 2},
        "idm": {"iterations": 40, "hidden": [16], "transitions": 200},
        "rollout": {"steps": 15},
        "eval": {"rollouts": 3},
    }
    cfgp = str(d / "cfg.json")
    with open(cfgp, "w") as f:
        json.dump(cfg, f)
    demos = str(d / "demos.jsonl")
    model = str(d / "stm.json")
    assert run(["gen-demos", "--task", "reacher", "--count", "4",
                "--out", demos, "--config", cfgp]) == 0
    assert run(["train-stm", "--dataset", demos, "--out", model,
                "--config", cfgp]) == 0
    return {"dir": d, "cfg": cfgp, "demos": demos, "model": model}


# ---------------------------------------------------------------------------
# config handling

def test_default_config_loads():
    cfg = load_config(None)
    assert cfg["stm"]["hidden"] == 64
    assert cfg["schedule"] == {"u": 5, "v": 5}


def test_config_rejects_unknown_keys(tmp_path):
    p = str(tmp_path / "bad.json")
    with open(p, "w") as f:
        json.dump({"stm": {"hiden": 3}}, f)
    with pytest.raises(CliError, match="hiden"):
        load_config(p)
    with open(p, "w") as f:
        json.dump({"nonsense": 1}, f)
    with pytest.raises(CliError):
        load_config(p)


def test_config_merge_is_deep():
    out = _merge({"a": {"x": 1, "y": 2}, "b": 3}, {"a": {"y": 9}})
    assert out == {"a": {"x": 1, "y": 9}, "b": 3}


def test_parse_goal_at():
    sched = _parse_goal_at(["10:0.3,-0.2", "25:0.1,0.4"])
    assert sched[0][0] == 10 and np.allclose(sched[0][1], [0.3, -0.2])
    assert sched[1][0] == 25
    with pytest.raises(CliError):
        _parse_goal_at(["banana"])


def test_write_csv_has_header(tmp_path):
    p = str(tmp_path / "t.csv")
    write_csv(p, ["a", "b"], [(1, 0.5), (2, 1.5)])
    lines = open(p).read().splitlines()
    assert lines[0] == "a,b"
    assert lines[1] == "1,0.5"


# ---------------------------------------------------------------------------
# commands

def test_gen_demos_output_loads(workdir):
    demos, arm = load_dataset(workdir["demos"])
    assert len(demos) == 4
    assert os.path.exists(workdir["demos"] + ".config.json")


def test_train_stm_outputs(workdir):
    ck = load_checkpoint(workdir["model"])
    assert len(ck.loss_curve) == 40
    loss_csv = workdir["model"] + "_loss.csv"
    lines = open(loss_csv).read().splitlines()
    assert lines[0] == "iteration,loss"
    assert len(lines) == 41


def test_train_stm_variants(workdir):
    out = str(workdir["dir"] / "lin.json")
    assert run(["train-stm", "--dataset", workdir["demos"], "--out", out,
                "--config", workdir["cfg"], "--variant", "lstm",
                "--iterations", "10"]) == 0
    ck = load_checkpoint(out)
    assert ck.cfg.head == "linear"
    assert ck.cfg.schedule.v == 0


def test_rollout_writes_traj_and_ee_csv(workdir):
    out = str(workdir["dir"] / "roll.jsonl")
    assert run(["rollout", "--checkpoint", workdir["model"], "--out", out,
                "--config", workdir["cfg"], "--steps", "12",
                "--goal", "0.4,0.3", "--goal-at", "6:0.2,-0.3"]) == 0
    trajs, arm = load_dataset(out)
    assert len(trajs[0]) == 13
    assert np.allclose(trajs[0].task.goal, [0.2, -0.3])
    lines = open(out + "_ee.csv").read().splitlines()
    assert lines[0].startswith("step,ee_x,ee_y,q0")
    assert len(lines) == 14


def test_rollout_deterministic_byte_identical(workdir):
    a = str(workdir["dir"] / "ra.jsonl")
    b = str(workdir["dir"] / "rb.jsonl")
    for out in (a, b):
        assert run(["rollout", "--checkpoint", workdir["model"], "--out", out,
                    "--config", workdir["cfg"], "--seed", "7"]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()
    assert open(a + "_ee.csv", "rb").read() == open(b + "_ee.csv", "rb").read()


def test_smooth_reduces_cost(workdir):
    roll = str(workdir["dir"] / "roll.jsonl")
    out = str(workdir["dir"] / "smooth.jsonl")
    assert run(["smooth", "--traj", roll, "--out", out,
                "--config", workdir["cfg"], "--gamma", "1.0"]) == 0
    lines = open(out + "_cost.csv").read().splitlines()
    costs = [float(l.split(",")[1]) for l in lines[1:]]
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    trajs, _ = load_dataset(out)
    orig, _ = load_dataset(roll)
    assert np.allclose(trajs[0].joint_angles()[0], orig[0].joint_angles()[0])
    assert np.allclose(trajs[0].joint_angles()[-1], orig[0].joint_angles()[-1])


def test_eval_writes_csv(workdir):
    out = str(workdir["dir"] / "eval.csv")
    assert run(["eval", "--checkpoint", workdir["model"], "--out", out,
                "--config", workdir["cfg"], "--rollouts", "3"]) == 0
    lines = open(out).read().splitlines()
    assert lines[0] == "rollout,success,final_error"
    assert len(lines) == 4


def test_train_idm_and_track(workdir):
    idm = str(workdir["dir"] / "idm.json")
    assert run(["train-idm", "--out", idm, "--config", workdir["cfg"]]) == 0
    out = str(workdir["dir"] / "track.csv")
    assert run(["track", "--stm", workdir["model"], "--idm", idm,
                "--out", out, "--config", workdir["cfg"], "--steps", "8"]) == 0
    lines = open(out).read().splitlines()
    assert lines[0].startswith("step,desired_q0")
    assert lines[0].endswith("error_norm")
    assert len(lines) == 9


def test_track_oracle_mode(workdir):
    out = str(workdir["dir"] / "track_oracle.csv")
    assert run(["track", "--stm", workdir["model"], "--oracle",
                "--out", out, "--config", workdir["cfg"], "--steps", "8"]) == 0
    lines = open(out).read().splitlines()
    errs = [float(l.split(",")[-1]) for l in lines[1:]]
    assert max(errs) < 1e-3


def test_track_requires_idm_or_oracle(workdir, capsys):
    out = str(workdir["dir"] / "nope.csv")
    assert run(["track", "--stm", workdir["model"], "--out", out,
                "--config", workdir["cfg"]]) == 1
    assert "error:" in capsys.readouterr().err


def test_bench_runs(workdir, capsys):
    # bench rolls out a circle task, so it needs a circle-trained model
    demos = str(workdir["dir"] / "circle_bench.jsonl")
    model = str(workdir["dir"] / "stm_circle.json")
    assert run(["gen-demos", "--task", "circle", "--out", demos,
                "--config", workdir["cfg"]]) == 0
    assert run(["train-stm", "--dataset", demos, "--out", model,
                "--config", workdir["cfg"], "--iterations", "10"]) == 0
    capsys.readouterr()
    out = str(workdir["dir"] / "bench.csv")
    assert run(["bench", "--checkpoint", model, "--repeats", "1",
                "--out", out, "--config", workdir["cfg"]]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["stm_seconds"] > 0 and report["ik_seconds"] > 0
    assert open(out).read().splitlines()[0] == "metric,value"


def test_missing_checkpoint_is_clean_error(workdir, capsys):
    assert run(["rollout", "--checkpoint", "/does/not/exist.json",
                "--out", str(workdir["dir"] / "x.jsonl")]) == 1
    assert "error:" in capsys.readouterr().err


def test_gen_demos_circle(workdir):
    out = str(workdir["dir"] / "circle.jsonl")
    assert run(["gen-demos", "--task", "circle", "--out", out,
                "--config", workdir["cfg"]]) == 0
    demos, _ = load_dataset(out)
    assert len(demos) == 10
