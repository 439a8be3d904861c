from pathlib import Path

import numpy as np
import pytest

from rpbt.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from rpbt.config import ExperimentConfig, parse_config
from rpbt.experiments import (
    ToySummary,
    agent_checkpoint,
    agent_from_checkpoint,
    champion_vs_random,
    cmd_eval,
    cmd_tournament,
    expand_checkpoints,
    load_player,
    snapshot_checkpoint,
    toy_agent,
    toy_ordering,
    train_toy_agent,
)
from rpbt.envs import GridDuel, RandomActor
from rpbt.population import initial_population, run_round
from rpbt.rppo import PolicySnapshot, collect_rollout, rppo_update, snapshot

TINY = {
    "risk": {"taus": [0.2, 0.8]},
    "rppo": {"hidden_sizes": [8], "horizon": 32, "minibatch_size": 16, "update_epochs": 1, "total_steps": 64},
    "population": {"size": 2, "initial_taus": [0.3, 0.7], "steps_per_round": 32, "elo_games_per_pair": 1},
    "run": {"eval_rollouts": 20},
}


@pytest.fixture
def config():
    return parse_config(TINY)


def test_agent_checkpoint_round_trip(config, tmp_path: Path) -> None:
    agent = train_toy_agent(config, toy_agent(config, 0.2, seed=1))
    path = save_checkpoint(agent_checkpoint(agent), tmp_path / "agent.ckpt")
    restored = agent_from_checkpoint(load_checkpoint(path), path)
    assert (restored.tau, restored.step, restored.updates) == (agent.tau, agent.step, agent.updates)
    assert restored.config == agent.config
    np.testing.assert_array_equal(restored.policy.data, agent.policy.data)
    np.testing.assert_array_equal(restored.value_adam.v, agent.value_adam.v)
    assert restored.policy_adam.t == agent.policy_adam.t
    assert restored.rng.random() == agent.rng.random()


def test_snapshot_checkpoint_is_not_resumable(config, tmp_path: Path) -> None:
    agent = toy_agent(config, 0.5, seed=0)
    path = save_checkpoint(snapshot_checkpoint(snapshot(agent)), tmp_path / "frozen.ckpt")
    with pytest.raises(CheckpointError):
        agent_from_checkpoint(load_checkpoint(path), path)


def test_load_player(config, tmp_path: Path) -> None:
    env = GridDuel()
    assert isinstance(load_player("random", env), RandomActor)
    pop = initial_population(config.population.settings(), config.rppo_config(0.5), config.duel_spec(), 0)
    path = save_checkpoint(snapshot_checkpoint(snapshot(pop.agents[1], 4)), tmp_path / "a1.ckpt")
    player = load_player(str(path), env)
    assert isinstance(player, PolicySnapshot)
    assert (player.agent_id, player.round, player.tau) == (1, 4, 0.7)

    toy_path = save_checkpoint(snapshot_checkpoint(snapshot(toy_agent(config, 0.5, 0))), tmp_path / "toy.ckpt")
    with pytest.raises(CheckpointError):
        load_player(str(toy_path), env)


def test_expand_checkpoints(tmp_path: Path) -> None:
    (tmp_path / "pool" / "old").mkdir(parents=True)
    for name in ("b.ckpt", "a.ckpt", "old/c.ckpt", "manifest.json"):
        (tmp_path / "pool" / name).write_bytes(b"")
    single = tmp_path / "elsewhere.bin"
    found = expand_checkpoints([tmp_path / "pool", single], "*.ckpt")
    relative = [p.relative_to(tmp_path).as_posix() for p in found]
    assert relative == ["pool/a.ckpt", "pool/b.ckpt", "pool/old/c.ckpt", "elsewhere.bin"]


def test_tournament_rates_are_consistent(config, tmp_path: Path) -> None:
    pop = initial_population(config.population.settings(), config.rppo_config(0.5), config.duel_spec(), 0)
    paths = [
        str(save_checkpoint(snapshot_checkpoint(snapshot(agent)), tmp_path / f"a{agent.agent_id}.ckpt"))
        for agent in pop.agents
    ]
    result = cmd_tournament(config, [*paths, "random"], games=20)
    n = 3
    for a in range(n):
        assert np.isnan(result.win_rate[a, a])
        for b in range(n):
            if a != b:
                total = result.win_rate[a, b] + result.win_rate[b, a] + result.draw_rate[a, b]
                assert total == pytest.approx(1.0)
    data = result.to_dict()
    assert data["win_rate"][0][0] is None
    assert data["names"][-1] == "random"


def test_eval_is_deterministic(config) -> None:
    first = cmd_eval(config, "random", "random", 30)
    second = cmd_eval(config, "random", "random", 30)
    assert first == second
    assert first.games == 30


def test_eval_missing_checkpoint(config, tmp_path: Path) -> None:
    with pytest.raises(CheckpointError) as excinfo:
        cmd_eval(config, str(tmp_path / "nope.ckpt"), "random", 2)
    assert excinfo.value.field == "file"


def test_toy_ordering() -> None:
    summaries = [
        ToySummary(0.2, 0, 100, 0.1, 1.0, 6.0),
        ToySummary(0.5, 0, 100, 0.3, 1.0, 5.0),
        ToySummary(0.8, 0, 100, 0.6, 0.9, 3.0),
        ToySummary(0.2, 1, 100, 0.4, 1.0, None),
        ToySummary(0.8, 1, 100, 0.2, 1.0, 3.0),
    ]
    ordering = toy_ordering(summaries)
    assert ordering["seeds"]["0"] == {"increasing": True, "shorter_path": True}
    assert ordering["seeds"]["1"] == {"increasing": False, "shorter_path": False}
    assert ordering["increasing_seeds"] == 1


def test_rollout_against_loaded_player(config, tmp_path: Path) -> None:
    env = GridDuel()
    pop = initial_population(config.population.settings(), config.rppo_config(0.5), config.duel_spec(), 0)
    path = save_checkpoint(snapshot_checkpoint(snapshot(pop.agents[0])), tmp_path / "opponent.ckpt")
    opponent = load_player(str(path), env)
    traj = collect_rollout(pop.agents[1], env, 32, np.random.default_rng(0), opponent)
    updated, _ = rppo_update(pop.agents[1], traj)
    assert updated.step == 32



@pytest.mark.slow
def test_population_training_acceptance() -> None:
    config = ExperimentConfig()
    settings = config.population.settings()
    pop = initial_population(settings, config.rppo_config(0.5), config.duel_spec(), config.run.seed)
    assert (settings.size, config.population.rounds) == (5, 30)
    for round_index in range(config.population.rounds):
        before = len(pop.pool)
        pop, report = run_round(pop, config.duel_spec(), workers=2)
        assert len(pop.pool) == before + settings.size
        assert report.round == round_index + 1
        assert pop.elo.total == pytest.approx(5000.0, abs=1e-6)
        assert all(0.05 <= tau <= 0.95 for tau in pop.taus)
    result = champion_vs_random(config, pop)
    assert result.games == 200
    assert result.win_rate >= 0.8
