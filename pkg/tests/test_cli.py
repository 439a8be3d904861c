import importlib
from pathlib import Path

import pytest
from click.testing import CliRunner

from rpbt import __version__, cli
from rpbt.checkpoint import load_checkpoint
from rpbt.output import read_records

TINY_TOML = """
[risk]
taus = [0.5]

[rppo]
hidden_sizes = [8]
horizon = 32
minibatch_size = 16
update_epochs = 1
total_steps = 64

[population]
size = 2
initial_taus = [0.3, 0.7]
rounds = 1
steps_per_round = 32
elo_games_per_pair = 1
eval_games = 4

[run]
eval_rollouts = 5
output_dir = "{output_dir}"
"""


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def tiny_config(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML.format(output_dir=(tmp_path / "run").as_posix()))
    return path


def test_version(runner: CliRunner) -> None:
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_verify_passes(runner: CliRunner, tmp_path: Path) -> None:
    result = runner.invoke(cli, ["verify", "--mdps", "1", "-o", str(tmp_path)])
    assert result.exit_code == 0, result.output
    report = (tmp_path / "verify-report.txt").read_text()
    assert "1. contraction: PASS" in report
    assert "7. gridworld risk ordering: SKIPPED" in report


def test_verify_detects_injected_fault(runner: CliRunner, tmp_path: Path) -> None:
    result = runner.invoke(cli, ["verify", "--mdps", "2", "--inject-fault", "--report", str(tmp_path / "r.txt")])
    assert result.exit_code == 1
    assert "1. contraction: FAIL" in (tmp_path / "r.txt").read_text()


def test_verify_user_mdp(runner: CliRunner, tmp_path: Path) -> None:
    path = tmp_path / "bandit.mdp"
    path.write_text("states 3\nactions 1\nterminal 1 2\n0 0 1 0.5 0.0\n0 0 2 0.5 1.0\n")
    result = runner.invoke(cli, ["verify", "--mdps", "1", "--mdp", str(path), "-o", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "1. contraction: PASS" in (tmp_path / "verify-report.txt").read_text()


def test_verify_invalid_mdp_exits_2(runner: CliRunner, tmp_path: Path) -> None:
    path = tmp_path / "broken.mdp"
    path.write_text("states 2\nactions 1\n0 0 1 0.5 0.0\n")
    result = runner.invoke(cli, ["verify", "--mdp", str(path), "-o", str(tmp_path)])
    assert result.exit_code == 2
    assert "broken.mdp" in result.output
    assert not (tmp_path / "verify-report.txt").exists()


def test_bad_config_exits_2(runner: CliRunner, tmp_path: Path) -> None:
    path = tmp_path / "bad.toml"
    path.write_text("[risk]\nbeta = 1.0\n")
    result = runner.invoke(cli, ["verify", "--config", str(path)])
    assert result.exit_code == 2
    assert "risk.beta" in result.output


def test_config_run_table_sets_defaults(runner: CliRunner, tiny_config: Path, tmp_path: Path) -> None:
    result = runner.invoke(cli, ["train-toy", "--config", str(tiny_config), "--seeds", "3"])
    assert result.exit_code == 0, result.output
    run = tmp_path / "run"
    checkpoint = load_checkpoint(run / "checkpoints" / "seed-3" / "tau-0.50.ckpt")
    assert checkpoint.step == 64
    assert (run / "summary.json").exists()
    assert (run / "visitation" / "seed-3" / "tau-0.50.csv").exists()
    assert len(read_records(run / "metrics" / "seed-3" / "tau-0.50.jsonl")) == 2
    assert "1 agent trained." in result.output


def test_existing_run_needs_force(runner: CliRunner, tiny_config: Path) -> None:
    args = ["train-toy", "--config", str(tiny_config), "--total-steps", "32"]
    assert runner.invoke(cli, args).exit_code == 0
    assert runner.invoke(cli, args).exit_code == 3
    assert runner.invoke(cli, [*args, "--force"]).exit_code == 0


def test_train_rpbt(runner: CliRunner, tiny_config: Path, tmp_path: Path) -> None:
    result = runner.invoke(cli, ["train-rpbt", "--config", str(tiny_config)])
    assert result.exit_code == 0, result.output
    run = tmp_path / "run"
    assert len(read_records(run / "rounds.jsonl")) == 1
    assert len(list((run / "pool").glob("*.ckpt"))) == 4
    assert (run / "checkpoints" / "champion.ckpt").exists()
    assert "1 round completed, 4 games played." in result.output

    tournament = runner.invoke(
        cli, ["tournament", str(run / "pool"), "--games", "4", "--output", str(tmp_path / "matrix.json")]
    )
    assert tournament.exit_code == 0, tournament.output
    assert (tmp_path / "matrix.json").exists()
    assert "24 games played." in tournament.output


def test_eval_random_players(runner: CliRunner, tmp_path: Path) -> None:
    result = runner.invoke(cli, ["eval", "random", "random", "--games", "6", "--output", str(tmp_path / "e.json")])
    assert result.exit_code == 0, result.output
    assert "random vs random" in result.output
    assert "6 games played." in result.output


def test_eval_missing_checkpoint_is_runtime_error(runner: CliRunner, tmp_path: Path) -> None:
    result = runner.invoke(cli, ["eval", str(tmp_path / "missing.ckpt"), "random"])
    assert result.exit_code == 3


def test_tournament_needs_two_players(runner: CliRunner, tmp_path: Path) -> None:
    (tmp_path / "only.ckpt").write_bytes(b"")
    result = runner.invoke(cli, ["tournament", str(tmp_path)])
    assert result.exit_code == 2


def test_same_seed_same_metrics(runner: CliRunner, tiny_config: Path, tmp_path: Path) -> None:
    streams = []
    for name in ("first", "second"):
        output_dir = tmp_path / name
        result = runner.invoke(cli, ["train-toy", "--config", str(tiny_config), "-o", str(output_dir)])
        assert result.exit_code == 0, result.output
        streams.append((output_dir / "metrics" / "seed-0" / "tau-0.50.jsonl").read_bytes())
    assert streams[0] == streams[1]


def test_resume_continues_step_counter(runner: CliRunner, tiny_config: Path, tmp_path: Path) -> None:
    base = ["train-toy", "--config", str(tiny_config)]
    assert runner.invoke(cli, [*base, "--total-steps", "32"]).exit_code == 0
    result = runner.invoke(cli, [*base, "--total-steps", "64", "--resume"])
    assert result.exit_code == 0, result.output
    metrics = read_records(tmp_path / "run" / "metrics" / "seed-0" / "tau-0.50.jsonl")
    assert [record["step"] for record in metrics] == [32, 64]
    assert load_checkpoint(tmp_path / "run" / "checkpoints" / "seed-0" / "tau-0.50.ckpt").step == 64


def test_unexpected_error_is_runtime_error(runner: CliRunner, monkeypatch: pytest.MonkeyPatch) -> None:
    def broken(*args, **kwargs):
        raise TypeError("wrong arguments")

    monkeypatch.setattr(importlib.import_module("rpbt.cli"), "cmd_eval", broken)
    result = runner.invoke(cli, ["eval", "random", "random", "--games", "2"])
    assert result.exit_code == 3
    assert "TypeError: wrong arguments" in result.output
