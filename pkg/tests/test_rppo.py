import numpy as np
import pytest

from rpbt.envs import GridDuel, RandomActor, WindyGridworld
from rpbt.model import ActionSpace, DomainError, RiskConfig, SpaceKind
from rpbt.nn import HeadKind
from rpbt.rppo import (
    RppoConfig,
    collect_rollout,
    create_agent,
    head_for,
    rppo_update,
    snapshot,
    train,
)


def small_config(tau: float = 0.5, **kwargs) -> RppoConfig:
    settings = dict(horizon=32, minibatch_size=16, update_epochs=2, hidden_sizes=(8,), learning_rate=1e-3)
    settings.update(kwargs)
    return RppoConfig(risk=RiskConfig(tau=tau, gamma=0.95, lam=0.95), **settings)


def gridworld_agent(tau: float = 0.5, seed: int = 0, **kwargs):
    env = WindyGridworld()
    return create_agent(0, small_config(tau, **kwargs), env.observation_dim, env.action_space, seed), env


@pytest.mark.parametrize(
    "kwargs",
    [{"clip_epsilon": 0.0}, {"update_epochs": 0}, {"horizon": 0}, {"learning_rate": 0.0}, {"max_grad_norm": -1.0}],
)
def test_config_validation(kwargs) -> None:
    with pytest.raises(DomainError):
        small_config(**kwargs)


def test_with_tau() -> None:
    config = small_config(0.5).with_tau(0.8)
    assert config.tau == 0.8
    assert config.risk.alpha == pytest.approx(1 / 1.6)
    assert config.horizon == 32


def test_head_for() -> None:
    assert head_for(ActionSpace(SpaceKind.DISCRETE, 4)).kind is HeadKind.CATEGORICAL
    gaussian = head_for(ActionSpace(SpaceKind.CONTINUOUS, 2, -0.5, 0.5))
    assert (gaussian.kind, gaussian.dim, gaussian.low, gaussian.high) == (HeadKind.GAUSSIAN, 2, -0.5, 0.5)


def test_rollout_shape_and_bootstrap() -> None:
    agent, env = gridworld_agent()
    traj = collect_rollout(agent, env, 1, np.random.default_rng(0))
    assert len(traj) == 1
    assert traj.obs.shape == (1, 16)
    assert traj.bootstrap_value != 0.0 or traj.dones[0]


def test_rollout_is_deterministic() -> None:
    trajectories = []
    for _ in range(2):
        agent, env = gridworld_agent(seed=3)
        trajectories.append(collect_rollout(agent, env, 40, np.random.default_rng(9)))
    first, second = trajectories
    np.testing.assert_array_equal(first.actions, second.actions)
    np.testing.assert_array_equal(first.rewards, second.rewards)
    np.testing.assert_array_equal(first.log_probs, second.log_probs)


def test_rollout_resumes_an_unfinished_episode() -> None:
    agent, env = gridworld_agent()
    rng = np.random.default_rng(0)
    collect_rollout(agent, env, 3, rng)
    if not env.done:
        steps = env.steps
        collect_rollout(agent, env, 1, rng)
        assert env.steps == steps + 1 or env.steps == 1


def test_self_play_rewards_sum_to_zero() -> None:
    env = GridDuel()
    agent = create_agent(0, small_config(), env.observation_dim, env.action_space, 0)
    traj = collect_rollout(agent, env, 200, np.random.default_rng(1), opponent=RandomActor(env.action_space))
    assert traj.opponent_rewards is not None
    np.testing.assert_array_equal(traj.rewards + traj.opponent_rewards, 0.0)


def test_update_is_functional() -> None:
    agent, env = gridworld_agent()
    traj = collect_rollout(agent, env, agent.config.horizon, agent.rng)
    before = agent.policy.data.copy()
    new, diagnostics = rppo_update(agent, traj)
    np.testing.assert_array_equal(agent.policy.data, before)
    assert agent.step == 0 and agent.updates == 0
    assert new.step == 32 and new.updates == 1
    assert not np.array_equal(new.policy.data, before)
    assert 0.0 <= diagnostics.clip_fraction <= 1.0
    assert np.isfinite(diagnostics.approx_kl)
    assert diagnostics.tau == 0.5


def test_update_is_deterministic() -> None:
    results = []
    for _ in range(2):
        agent, env = gridworld_agent(seed=5)
        traj = collect_rollout(agent, env, agent.config.horizon, agent.rng)
        new, _ = rppo_update(agent, traj)
        results.append(new.policy.data)
    np.testing.assert_array_equal(*results)


def test_train_reports_every_update() -> None:
    agent, env = gridworld_agent()
    seen = []
    trained = train(agent, env, 96, on_update=seen.append)
    assert trained.step == 96
    assert [d.step for d in seen] == [32, 64, 96]
    assert all(record.to_record()["agent_id"] == 0 for record in seen)


def test_snapshot_is_frozen() -> None:
    agent, env = gridworld_agent()
    frozen = snapshot(agent, 3)
    assert frozen.round == 3 and frozen.tau == agent.tau
    with pytest.raises(ValueError):
        frozen.params.data[0] = 1.0
    fingerprint = frozen.fingerprint()
    agent.policy.data[0] += 1.0
    assert frozen.fingerprint() == fingerprint
    assert 0 <= frozen.act(env.reset(np.random.default_rng(0)), np.random.default_rng(0)) < 4
