from dataclasses import replace

import numpy as np
import pytest

import rpbt.population
from rpbt.config import ExperimentConfig
from rpbt.envs import GridDuel, RandomActor
from rpbt.model import DomainError, RiskConfig
from rpbt.population import (
    EloTable,
    MatchResult,
    PolicyPool,
    PopulationSettings,
    RoundAbortedError,
    elo_expected,
    elo_update,
    exploit_explore,
    head_to_head,
    initial_population,
    perturb_tau,
    run_round,
    sample_opponent,
    select_champion,
)
from rpbt.rppo import RppoConfig, snapshot

DUEL = ("duel", {})


def tiny_config() -> RppoConfig:
    return RppoConfig(
        risk=RiskConfig(gamma=0.95), horizon=16, minibatch_size=8, update_epochs=1, hidden_sizes=(4,)
    )


def tiny_population(size: int = 3, seed: int = 0, **kwargs):
    taus = (0.2, 0.5, 0.8)[:size]
    settings = PopulationSettings(
        size=size, initial_taus=taus, steps_per_round=16, elo_games_per_pair=1, **kwargs
    )
    return initial_population(settings, tiny_config(), DUEL, seed)


def test_elo_expected() -> None:
    assert elo_expected(1000.0, 1000.0) == 0.5
    assert elo_expected(1000.0, 1400.0) == pytest.approx(1 / 11)


def test_elo_update_values() -> None:
    table = elo_update(EloTable.create(2), 0, 1, 1.0)
    assert table.ratings == pytest.approx((1016.0, 984.0))

    underdog = elo_update(EloTable((1000.0, 1400.0)), 0, 1, 1.0)
    assert underdog.ratings[0] == pytest.approx(1029.0909, abs=1e-4)
    assert underdog.ratings[1] == pytest.approx(1370.9091, abs=1e-4)


def test_draw_between_equals_changes_nothing() -> None:
    table = EloTable.create(2)
    assert elo_update(table, 0, 1, 0.5).ratings == table.ratings


def test_elo_total_is_conserved() -> None:
    rng = np.random.default_rng(0)
    table = EloTable.create(5)
    for _ in range(500):
        a, b = rng.choice(5, size=2, replace=False)
        table = elo_update(table, int(a), int(b), float(rng.choice([0.0, 0.5, 1.0])))
    assert table.total == pytest.approx(5000.0, abs=1e-9)


@pytest.mark.parametrize("args", [(0, 1, 0.7), (0, 0, 1.0), (0, 5, 1.0)])
def test_elo_update_rejects(args) -> None:
    with pytest.raises(DomainError):
        elo_update(EloTable.create(2), *args)


def test_perturb_tau_clips() -> None:
    assert perturb_tau(0.9, 0.15) == 0.95
    assert perturb_tau(0.1, -0.2) == 0.05
    assert perturb_tau(0.5, 0.1) == pytest.approx(0.6)


def test_settings_validation() -> None:
    with pytest.raises(DomainError):
        PopulationSettings(size=2, initial_taus=(0.5,))
    with pytest.raises(DomainError):
        PopulationSettings(size=1, initial_taus=(0.99,))


def test_sample_opponent_empty_pool() -> None:
    with pytest.raises(DomainError):
        sample_opponent(PolicyPool(), np.random.default_rng(0))


def test_sample_opponent_is_uniform() -> None:
    pop = tiny_population()
    rng = np.random.default_rng(1)
    counts = np.zeros(len(pop.pool))
    for _ in range(3000):
        entry = sample_opponent(pop.pool, rng)
        counts[entry.agent_id] += 1
    assert np.all(np.abs(counts / 3000 - 1 / 3) < 0.04)


def test_initial_population() -> None:
    pop = tiny_population()
    assert pop.taus == (0.2, 0.5, 0.8)
    assert len(pop.pool) == 3
    assert pop.elo.ratings == (1000.0, 1000.0, 1000.0)
    assert [entry.checkpoint_id for entry in pop.pool.entries] == ["r0000-a0", "r0000-a1", "r0000-a2"]


def test_pool_add_is_append_only() -> None:
    pop = tiny_population()
    grown = pop.pool.add([snapshot(pop.agents[0], 1)])
    assert len(pop.pool) == 3 and len(grown) == 4
    assert grown.entries[:3] == pop.pool.entries
    assert grown.manifest()[-1]["id"] == "r0001-a0"


def test_select_champion_prefers_lowest_id() -> None:
    pop = tiny_population()
    tied = replace(pop, elo=EloTable((1000.0, 1100.0, 1100.0)))
    assert select_champion(tied) == 1


def test_exploit_copies_champion() -> None:
    pop = tiny_population()
    pop = replace(pop, elo=EloTable((1600.0, 1000.0, 1200.0)))
    explored, events = exploit_explore(pop, np.random.default_rng(0))
    assert [e.agent_id for e in events] == [1]
    child = explored.agents[1]
    np.testing.assert_array_equal(child.policy.data, pop.agents[0].policy.data)
    np.testing.assert_array_equal(child.value.data, pop.agents[0].value.data)
    assert child.policy.data is not pop.agents[0].policy.data
    assert abs(child.tau - 0.2) <= 0.2 + 1e-12
    assert 0.05 <= child.tau <= 0.95
    assert explored.agents[2] is pop.agents[2]
    assert pop.agents[1].tau == 0.5


def test_exploit_with_static_risk_keeps_tau() -> None:
    pop = tiny_population(static_risk=True)
    pop = replace(pop, elo=EloTable((1600.0, 1000.0, 1000.0)))
    explored, events = exploit_explore(pop, np.random.default_rng(0))
    assert len(events) == 2
    assert explored.taus == pop.taus


def test_match_result() -> None:
    result = MatchResult()
    for score in (1.0, 1.0, 0.5, 0.0):
        result.record(score)
    assert (result.games, result.win_rate, result.draw_rate) == (4, 0.5, 0.25)


def test_head_to_head_counts_every_game() -> None:
    player = RandomActor(GridDuel().action_space)
    result = head_to_head(DUEL, player, player, 10, seed=3)
    assert result.games == 10


def test_round_grows_pool_and_conserves_elo() -> None:
    pop = tiny_population()
    after, report = run_round(pop, DUEL)
    assert after.round == 1
    assert len(after.pool) == 6
    assert report.pool_additions == ["r0001-a0", "r0001-a1", "r0001-a2"]
    assert after.elo.total == pytest.approx(3000.0, abs=1e-9)
    assert all(agent.step == 16 for agent in after.agents)
    assert len(pop.pool) == 3 and pop.round == 0


def test_round_is_deterministic() -> None:
    first, _ = run_round(tiny_population(seed=4), DUEL)
    second, _ = run_round(tiny_population(seed=4), DUEL)
    assert first.elo.ratings == second.elo.ratings
    for a, b in zip(first.agents, second.agents):
        np.testing.assert_array_equal(a.policy.data, b.policy.data)


def test_round_abort_leaves_population(monkeypatch) -> None:
    def explode(*args):
        raise RuntimeError("boom")

    monkeypatch.setattr(rpbt.population, "train_agent_round", explode)
    pop = tiny_population()
    with pytest.raises(RoundAbortedError) as excinfo:
        run_round(pop, DUEL)
    assert excinfo.value.round == 0
    assert len(pop.pool) == 3 and pop.round == 0


def test_round_from_default_config() -> None:
    config = ExperimentConfig().with_overrides(steps_per_round=200)
    pop = initial_population(config.population.settings(), config.rppo_config(0.5), config.duel_spec(), 0)
    assert pop.taus == (0.1, 0.4, 0.5, 0.6, 0.9)
    after, report = run_round(pop, config.duel_spec())
    assert len(after.pool) == 10
    assert after.elo.total == pytest.approx(5000.0, abs=1e-9)
    assert all(agent.step == 200 for agent in after.agents)
    assert report.round == 1


def test_round_exploits_underperformers() -> None:
    pop = tiny_population(exploit_threshold=50.0)
    # a 300-point lead cannot be lost in four games, so someone ends more than 50 behind
    pop = replace(pop, elo=EloTable((1300.0, 1000.0, 1000.0)))
    after, report = run_round(pop, DUEL)
    assert report.exploits
    champion = report.exploits[0].source_id
    assert champion == select_champion(after)
    for event in report.exploits:
        child = after.agents[event.agent_id]
        np.testing.assert_array_equal(child.policy.data, after.agents[champion].policy.data)
        np.testing.assert_array_equal(child.value.data, after.agents[champion].value.data)
        assert child.policy_adam.t == 0 and child.value_adam.t == 0
        assert not child.policy_adam.m.any() and not child.value_adam.v.any()
        assert event.copied_tau == after.agents[champion].tau
        assert child.tau == event.new_tau
        assert 0.05 <= event.new_tau <= 0.95
        assert abs(event.new_tau - event.copied_tau) <= 0.2 + 1e-12
        assert event.new_tau != event.copied_tau or event.new_tau in (0.05, 0.95)
    assert report.taus == after.taus
