import json

import pytest

from novelsac.cli import main
from novelsac.config import ConfigError, RunConfig, config_from_dict
from novelsac.env import MazeEnv
from novelsac.evaluation import (
    TrajectoryParseError,
    majority_corridor,
    parse_trajectory_text,
    read_trajectory_file,
    replay_matches,
    sign_test,
)

TINY = {
    "version": 1,
    "seed": 0,
    "env": {"step_cap": 60},
    "sac": {"batch_size": 16, "buffer_size": 500, "total_steps": 300, "warmup_steps": 100, "hidden": [8],
            "eval_interval": 100, "eval_episodes": 1, "alpha": 0.05},
    "novelty": {"max_attempts": 8},
    "train": {"n_policies": 2, "eval_episodes": 3},
    "eval": {"episodes": 2, "fallback": True},
    "recovery": {"max_rounds": 2, "step_cap": 200},
    "recover": {"episodes": 3},
}


def write_config(tmp_path, doc=TINY, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = write_config(root)
    assert main(["train", "--config", str(cfg), "--out", str(root / "a")]) == 0
    return root, cfg


# config

def test_defaults_round_trip_through_dict():
    cfg = RunConfig()
    again = config_from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert again.hash() == cfg.hash()


@pytest.mark.parametrize(
    "doc,match",
    [
        ({"version": 1, "sac": {"alpha": 0.1, "lr": 3}}, "unknown key.*sac.*lr"),
        ({"version": 1, "extra": {}}, "top-level"),
        ({"version": 2}, "version"),
        ({"version": 1, "sac": {"gamma": 2.0}}, "gamma"),
        ({"version": 1, "env": {"geometry": {"corridors": 4}}}, "env.geometry"),
        ({"version": 1, "recover": {"blockade": ["top"]}}, "top"),
        ({"version": 1, "seed": -1}, "seed"),
    ],
)
def test_bad_configs_are_rejected(doc, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(doc)


def test_unknown_key_exits_with_config_code(tmp_path, capsys):
    path = write_config(tmp_path, {"version": 1, "sac": {"alhpa": 0.1}})
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "alhpa" in capsys.readouterr().err


def test_invalid_json_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"version": 1,\n "seed": }\n')
    assert main(["train", "--config", str(path)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_numeric_divergence_exit_code(tmp_path, monkeypatch):
    from novelsac import cli
    from novelsac.autodiff import NumericError

    def boom(*a, **k):
        raise NumericError("training diverged")

    monkeypatch.setattr(cli, "build_library", boom)
    assert main(["train", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "o")]) == 2


# train / eval / recover

def test_train_outputs(trained):
    root, _ = trained
    out = root / "a"
    for name in ("library.json", "train_summary.json", "train_log_policy_1.tsv", "eval_policy_1.tsv", "eval_policy_2.tsv"):
        assert (out / name).exists()
    summary = json.loads((out / "train_summary.json").read_text())
    assert len(summary["majority_corridors"]) == 2
    lines = (out / "train_log_policy_2.tsv").read_text().splitlines()
    assert lines[0].startswith("# env_fingerprint:")
    assert any(line.startswith("# config_hash: ") for line in lines)


def test_train_rerun_is_byte_identical(trained, tmp_path):
    root, cfg = trained
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("library.json", "train_log_policy_1.tsv", "train_log_policy_2.tsv", "eval_policy_2.tsv", "train_summary.json"):
        assert (root / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_single_policy_library(tmp_path):
    doc = dict(TINY, train={"n_policies": 1, "eval_episodes": 1})
    assert main(["train", "--config", str(write_config(tmp_path, doc)), "--out", str(tmp_path / "o")]) == 0
    lib = json.loads((tmp_path / "o" / "library.json").read_text())
    assert len(lib["entries"]) == 1


def test_trajectory_files_replay(trained):
    root, _ = trained
    for name in ("eval_policy_1.tsv", "eval_policy_2.tsv"):
        traj = read_trajectory_file(root / "a" / name)
        assert traj.header["format"].startswith("novelsac.trajectory")
        assert replay_matches(MazeEnv(step_cap=60), traj)


def test_eval_command(trained, tmp_path, capsys):
    root, cfg = trained
    lib = root / "a" / "library.json"
    assert main(["eval", "--config", str(cfg), "--library", str(lib), "--out", str(tmp_path), "--policy", "2"]) == 0
    summary = json.loads((tmp_path / "eval_summary.json").read_text())
    rej = summary["policies"]["policy_2"]["rejection"]
    assert rej["actions"] > 0 and 0.0 <= rej["fallback_rate"] <= 1.0


def test_eval_without_fallback_satisfies_constraints(trained, tmp_path):
    root, _ = trained
    doc = json.loads(json.dumps(TINY))
    doc["eval"]["fallback"] = False
    doc["novelty"]["max_attempts"] = 64
    cfg = write_config(tmp_path, doc)
    assert main(["eval", "--config", str(cfg), "--library", str(root / "a" / "library.json"), "--out", str(tmp_path), "--policy", "2"]) == 0
    rej = json.loads((tmp_path / "eval_summary.json").read_text())["policies"]["policy_2"]["rejection"]
    assert rej["violations"] == 0 and rej["constraint_satisfaction_rate"] == 1.0


def test_eval_zero_episodes(trained, tmp_path):
    root, cfg = trained
    assert main(["eval", "--config", str(cfg), "--library", str(root / "a" / "library.json"), "--out", str(tmp_path), "--episodes", "0"]) == 0
    summary = json.loads((tmp_path / "eval_summary.json").read_text())
    assert summary["policies"]["policy_1"] == {"episodes": 0}


def test_eval_bad_index_and_missing_file(trained, tmp_path):
    root, cfg = trained
    lib = str(root / "a" / "library.json")
    assert main(["eval", "--config", str(cfg), "--library", lib, "--out", str(tmp_path), "--policy", "7"]) == 1
    assert main(["eval", "--config", str(cfg), "--library", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1


def test_recover_command(trained, tmp_path):
    root, cfg = trained
    lib = str(root / "a" / "library.json")
    assert main(["recover", "--config", str(cfg), "--library", lib, "--out", str(tmp_path)]) == 0
    pairs = (tmp_path / "recovery_pairs.tsv").read_text().splitlines()
    body = [line for line in pairs if not line.startswith("#")]
    assert body[0].startswith("seed\t") and len(body) == 1 + 3
    summary = json.loads((tmp_path / "recovery_summary.json").read_text())
    assert set(summary["success_rate"]) == {"optimal_only", "recovery", "random"}
    assert 0.0 <= summary["sign_test_recovery_vs_random"]["p_value"] <= 1.0


def test_recover_needs_two_entries(tmp_path):
    doc = dict(TINY, train={"n_policies": 1, "eval_episodes": 0})
    cfg = write_config(tmp_path, doc)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert main(["recover", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


# plot

def test_plot_is_byte_deterministic(trained, tmp_path):
    root, _ = trained
    inputs = [str(root / "a" / "eval_policy_1.tsv"), str(root / "a" / "eval_policy_2.tsv")]
    assert main(["plot", "--out", str(tmp_path), "--name", "p1", *inputs]) == 0
    assert main(["plot", "--out", str(tmp_path), "--name", "p2", *inputs]) == 0
    a, b = (tmp_path / "p1.svg").read_bytes(), (tmp_path / "p2.svg").read_bytes()
    assert a == b and a.startswith(b"<?xml")


def test_plot_geometry_only(tmp_path):
    assert main(["plot", "--out", str(tmp_path), "--blockade", "middle"]) == 0
    assert (tmp_path / "plot.svg").stat().st_size > 0


def test_plot_malformed_file_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("# format: novelsac.trajectory v1\nstep\tx\ty\tcontroller\tround\n0\t0.5\t0.1\toptimal\t0\n1\tabc\t0.1\toptimal\t0\n")
    assert main(["plot", "--out", str(tmp_path), str(bad)]) == 1
    assert "bad.tsv:4" in capsys.readouterr().err


def test_parse_rejects_unknown_columns():
    with pytest.raises(TrajectoryParseError, match=":1:"):
        parse_trajectory_text("a\tb\n1\t2\n")


# metrics

def test_majority_corridor():
    env = MazeEnv()
    assert majority_corridor(env, [(0.5, 0.05)]) is None
    assert majority_corridor(env, [(0.2, 0.3), (0.2, 0.4), (0.5, 0.5)]) == "left"
    # tie goes to the lower index
    assert majority_corridor(env, [(0.8, 0.3), (0.5, 0.5)]) == "middle"


def test_sign_test():
    r = sign_test([True] * 10, [False] * 10)
    assert r["wins"] == 10 and r["p_value"] == pytest.approx(0.5**10)
    assert sign_test([True, False], [True, False])["p_value"] == 1.0
    r = sign_test([True, True, False], [False, True, True])
    assert (r["wins"], r["losses"], r["ties"]) == (1, 1, 1)
