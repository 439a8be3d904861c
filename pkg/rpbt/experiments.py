"""
Command drivers: the windy gridworld risk experiment, population training on the duel and
head-to-head evaluation of saved policies.
"""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pathspec import PathSpec
from pathspec.patterns.gitwildmatch import GitWildMatchPatternError

from rpbt.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from rpbt.concurrency import derive_rng, derive_seed, run_jobs
from rpbt.config import ConfigError, ExperimentConfig
from rpbt.envs import (
    GridDuel,
    RandomActor,
    VisitationMap,
    WindyGridworld,
    make_env,
    visitation_counts,
    write_visitation_csv,
)
from rpbt.model import Actor, RiskConfig
from rpbt.nn import AdamState, ParamVector
from rpbt.output import RecordWriter, write_json
from rpbt.population import (
    EnvSpec,
    MatchResult,
    PolicyPool,
    PopulationState,
    head_to_head,
    initial_population,
    run_round,
    select_champion,
)
from rpbt.report import Report
from rpbt.rppo import AgentState, PolicySnapshot, RppoConfig, UpdateDiagnostics, create_agent, snapshot, train
from rpbt.rundir import RunDirectory

logger = logging.getLogger(__name__)

PURPOSE_TOY_INIT = 10
PURPOSE_TOY_EVAL = 11
PURPOSE_MATCH = 12

TOY_STREAMS = ("metrics",)
RPBT_STREAMS = ("metrics", "rounds", "elo", "tau")


# checkpoints


def _rppo_to_json(config: RppoConfig) -> Dict[str, Any]:
    data = asdict(config)
    data["hidden_sizes"] = list(config.hidden_sizes)
    return data


def _rppo_from_json(data: Dict[str, Any]) -> RppoConfig:
    data = dict(data)
    risk = RiskConfig(**data.pop("risk"))
    data["hidden_sizes"] = tuple(data["hidden_sizes"])
    return RppoConfig(risk=risk, **data)


def agent_checkpoint(agent: AgentState, **meta: Any) -> Checkpoint:
    return Checkpoint(
        policy_spec=agent.policy_spec,
        head=agent.head,
        tau=agent.tau,
        step=agent.step,
        sections={
            "policy": agent.policy,
            "value": agent.value,
            "policy_adam_m": ParamVector(agent.policy_adam.m, agent.policy.layout),
            "policy_adam_v": ParamVector(agent.policy_adam.v, agent.policy.layout),
            "value_adam_m": ParamVector(agent.value_adam.m, agent.value.layout),
            "value_adam_v": ParamVector(agent.value_adam.v, agent.value.layout),
        },
        value_spec=agent.value_spec,
        meta={
            "agent_id": agent.agent_id,
            "seed": agent.seed,
            "updates": agent.updates,
            "adam_steps": [agent.policy_adam.t, agent.value_adam.t],
            "rng_state": agent.rng.bit_generator.state,
            "rppo": _rppo_to_json(agent.config),
            **meta,
        },
    )


def agent_from_checkpoint(checkpoint: Checkpoint, path: Union[str, Path] = "<checkpoint>") -> AgentState:
    meta = checkpoint.meta
    try:
        config = _rppo_from_json(meta["rppo"])
        policy_t, value_t = meta["adam_steps"]
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        sections = checkpoint.sections
        if checkpoint.value_spec is None:
            raise KeyError("value_spec")
        return AgentState(
            agent_id=int(meta["agent_id"]),
            config=config,
            policy_spec=checkpoint.policy_spec,
            value_spec=checkpoint.value_spec,
            head=checkpoint.head,
            policy=sections["policy"],
            value=sections["value"],
            policy_adam=AdamState(sections["policy_adam_m"].data, sections["policy_adam_v"].data, int(policy_t)),
            value_adam=AdamState(sections["value_adam_m"].data, sections["value_adam_v"].data, int(value_t)),
            rng=rng,
            seed=int(meta["seed"]),
            step=checkpoint.step,
            updates=int(meta["updates"]),
        )
    except KeyError as e:
        raise CheckpointError(path, str(e.args[0]), "missing for a resumable agent") from None
    except (TypeError, ValueError) as e:
        raise CheckpointError(path, "meta", str(e)) from None


def snapshot_checkpoint(policy: PolicySnapshot) -> Checkpoint:
    return Checkpoint(
        policy_spec=policy.spec,
        head=policy.head,
        tau=policy.tau,
        step=0,
        sections={"policy": policy.params},
        meta={"agent_id": policy.agent_id, "round": policy.round},
    )


def actor_from_checkpoint(checkpoint: Checkpoint) -> PolicySnapshot:
    return PolicySnapshot(
        agent_id=int(checkpoint.meta.get("agent_id", 0)),
        round=int(checkpoint.meta.get("round", 0)),
        tau=checkpoint.tau,
        spec=checkpoint.policy_spec,
        head=checkpoint.head,
        params=checkpoint.policy,
    )


def load_player(source: str, env: GridDuel) -> Actor:
    """A saved policy, or the literal `random` for the uniform random player."""
    if source == "random":
        return RandomActor(env.action_space)
    checkpoint = load_checkpoint(source)
    if checkpoint.policy_spec.input_dim != env.observation_dim or checkpoint.head.dim != env.action_space.dim:
        raise CheckpointError(source, "policy_spec", "network does not fit the duel environment")
    return actor_from_checkpoint(checkpoint)


# windy gridworld


@dataclass
class ToySummary:
    tau: float
    seed: int
    steps: int
    water_adjacent_fraction: float
    success_rate: float
    mean_success_length: Optional[float]

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


def tau_label(tau: float) -> str:
    return f"tau-{tau:.2f}"


def toy_agent(config: ExperimentConfig, tau: float, seed: int) -> AgentState:
    env = make_env(*config.gridworld_spec())
    return create_agent(
        agent_id=0,
        config=config.rppo_config(tau),
        observation_dim=env.observation_dim,
        action_space=env.action_space,
        seed=derive_seed(seed, 0, int(round(tau * 1000)), PURPOSE_TOY_INIT),
    )


def train_toy_agent(
    config: ExperimentConfig,
    agent: AgentState,
    total_steps: Optional[int] = None,
    on_update: Optional[Callable[[UpdateDiagnostics], None]] = None,
) -> AgentState:
    env = make_env(*config.gridworld_spec())
    return train(agent, env, total_steps if total_steps is not None else config.rppo.total_steps, on_update)


def evaluate_toy_agent(
    config: ExperimentConfig, agent: AgentState, seed: int, episodes: Optional[int] = None
) -> Tuple[ToySummary, VisitationMap]:
    env = make_env(*config.gridworld_spec())
    assert isinstance(env, WindyGridworld)
    rng = derive_rng(seed, 0, int(round(agent.tau * 1000)), PURPOSE_TOY_EVAL)
    visits = visitation_counts(snapshot(agent), env, episodes or config.run.eval_rollouts, rng)
    summary = ToySummary(
        tau=agent.tau,
        seed=seed,
        steps=agent.step,
        water_adjacent_fraction=visits.fraction(env.water_adjacent()),
        success_rate=visits.success_rate,
        mean_success_length=visits.mean_success_length,
    )
    return summary, visits


def toy_job(config: ExperimentConfig, agent: AgentState, seed: int, metrics_path: Optional[str]) -> AgentState:
    if metrics_path is None:
        return train_toy_agent(config, agent)
    with RecordWriter(metrics_path) as writer:
        return train_toy_agent(config, agent, on_update=lambda d: writer.write({"seed": seed, **d.to_record()}))


def cmd_train_toy(config: ExperimentConfig, run: RunDirectory, report: Report, resume: bool = False) -> List[ToySummary]:
    """Train one agent per (seed, tau) on the windy gridworld and evaluate its state visitation."""
    jobs = []
    for seed in config.run.seed_list:
        for tau in config.risk.taus:
            name = f"seed-{seed}/{tau_label(tau)}"
            path = run.checkpoint(name)
            if resume and path.exists():
                agent = agent_from_checkpoint(load_checkpoint(path), path)
                report.progress(f"resuming {name} at step {agent.step}")
            else:
                agent = toy_agent(config, tau, seed)
            metrics = run.path / "metrics" / f"seed-{seed}" / f"{tau_label(tau)}.jsonl"
            if not resume:
                metrics.unlink(missing_ok=True)
            jobs.append((config, agent, seed, str(metrics)))

    logger.info("training %d gridworld agents on %d workers", len(jobs), config.run.workers)
    agents = run_jobs(toy_job, jobs, config.run.workers)
    summaries = []
    for (_, _, seed, _), agent in zip(jobs, agents):
        name = f"seed-{seed}/{tau_label(agent.tau)}"
        save_checkpoint(agent_checkpoint(agent), run.checkpoint(name))
        summary, visits = evaluate_toy_agent(config, agent, seed)
        write_visitation_csv(visits.frequencies, run.path / "visitation" / f"seed-{seed}" / f"{tau_label(agent.tau)}.csv")
        summaries.append(summary)
        report.agents_trained += 1
        report.progress(
            f"{name}: water-adjacent {summary.water_adjacent_fraction:.3f}, success {summary.success_rate:.3f}"
        )
    ordering = toy_ordering(summaries)
    write_json({"agents": [s.to_record() for s in summaries], "ordering": ordering}, run.path / "summary.json")
    return summaries


def toy_ordering(summaries: Iterable[ToySummary]) -> Dict[str, Any]:
    """Per seed: are water-adjacent fractions strictly increasing in tau, and is the most
    risk-seeking agent's successful path shorter than the most risk-averse one's?"""
    by_seed: Dict[int, List[ToySummary]] = {}
    for summary in summaries:
        by_seed.setdefault(summary.seed, []).append(summary)
    per_seed = {}
    for seed, group in sorted(by_seed.items()):
        group = sorted(group, key=lambda s: s.tau)
        fractions = [s.water_adjacent_fraction for s in group]
        increasing = all(a < b for a, b in zip(fractions, fractions[1:]))
        low, high = group[0].mean_success_length, group[-1].mean_success_length
        shorter = low is not None and high is not None and high < low
        per_seed[str(seed)] = {"increasing": increasing, "shorter_path": shorter}
    return {
        "seeds": per_seed,
        "increasing_seeds": sum(v["increasing"] for v in per_seed.values()),
        "shorter_path_seeds": sum(v["shorter_path"] for v in per_seed.values()),
    }


# population training on the duel


def _write_pool(run: RunDirectory, pool: PolicyPool, written: int) -> None:
    for entry in pool.entries[written:]:
        save_checkpoint(snapshot_checkpoint(entry.snapshot), run.pool / f"{entry.checkpoint_id}.ckpt")
    manifest = [{**item, "file": f"{item['id']}.ckpt"} for item in pool.manifest()]
    write_json(manifest, run.pool / "manifest.json")


def champion_vs_random(config: ExperimentConfig, pop: PopulationState) -> MatchResult:
    env = make_env(*config.duel_spec())
    champion = snapshot(pop.agents[select_champion(pop)], pop.round)
    return head_to_head(
        config.duel_spec(),
        champion,
        RandomActor(env.action_space),
        config.population.eval_games,
        derive_seed(config.run.seed, pop.round, 0, PURPOSE_MATCH),
    )


def cmd_train_rpbt(config: ExperimentConfig, run: RunDirectory, report: Report) -> PopulationState:
    spec = config.duel_spec()
    pop = initial_population(config.population.settings(), config.rppo_config(0.5), spec, config.run.seed)
    _write_pool(run, pop.pool, 0)
    writers = {name: RecordWriter(run.stream(name)) for name in RPBT_STREAMS}
    try:
        for agent in pop.agents:
            writers["tau"].write({"round": 0, "agent_id": agent.agent_id, "tau": agent.tau})
        writers["elo"].write({"round": 0, "ratings": list(pop.elo.ratings)})
        for _ in range(config.population.rounds):
            written = len(pop.pool)
            pop, round_report = run_round(pop, spec, config.run.workers)
            _write_pool(run, pop.pool, written)
            for diagnostics in round_report.diagnostics:
                writers["metrics"].write({"round": round_report.round, **diagnostics.to_record()})
            writers["rounds"].write(round_report.to_record())
            writers["elo"].write({"round": round_report.round, "ratings": list(round_report.ratings)})
            for agent in pop.agents:
                writers["tau"].write({"round": round_report.round, "agent_id": agent.agent_id, "tau": agent.tau})
            report.rounds_completed += 1
            report.progress(
                f"round {round_report.round}: champion {round_report.champion}, "
                f"taus {', '.join(f'{t:.2f}' for t in round_report.taus)}"
            )
    finally:
        for writer in writers.values():
            writer.close()

    for agent in pop.agents:
        save_checkpoint(agent_checkpoint(agent, round=pop.round), run.checkpoint(f"agent-{agent.agent_id}"))
    champion = select_champion(pop)
    save_checkpoint(snapshot_checkpoint(snapshot(pop.agents[champion], pop.round)), run.checkpoint("champion"))
    versus_random = champion_vs_random(config, pop)
    report.games_played += versus_random.games
    write_json(
        {
            "rounds": pop.round,
            "champion": champion,
            "ratings": list(pop.elo.ratings),
            "taus": list(pop.taus),
            "pool_size": len(pop.pool),
            "champion_vs_random": {**asdict(versus_random), "win_rate": versus_random.win_rate},
        },
        run.path / "summary.json",
    )
    return pop


# evaluation


def expand_checkpoints(paths: Sequence[Union[str, Path]], include: str) -> List[Path]:
    """Files are taken as given; directories contribute every file matching the gitwildmatch `include`."""
    try:
        spec = PathSpec.from_lines("gitwildmatch", include.splitlines() or [include])
    except GitWildMatchPatternError as e:
        raise ConfigError("include", f"not a valid pattern: {e}") from None
    found: List[Path] = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            found.extend(
                sorted(p for p in path.rglob("*") if p.is_file() and spec.match_file(p.relative_to(path).as_posix()))
            )
        else:
            found.append(path)
    logger.debug("checkpoints: %s", ", ".join(str(p) for p in found))
    return found


@dataclass
class TournamentResult:
    names: List[str]
    win_rate: np.ndarray
    draw_rate: np.ndarray
    games: int
    results: Dict[Tuple[int, int], MatchResult] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "names": self.names,
            "games": self.games,
            "win_rate": [[None if a == b else self.win_rate[a, b] for b in range(len(self.names))]
                         for a in range(len(self.names))],
            "draw_rate": [[None if a == b else self.draw_rate[a, b] for b in range(len(self.names))]
                          for a in range(len(self.names))],
        }


def _pair_job(spec: EnvSpec, a: str, b: str, games: int, seed: int) -> MatchResult:
    env = make_env(*spec)
    assert isinstance(env, GridDuel)
    return head_to_head(spec, load_player(a, env), load_player(b, env), games, seed)


def cmd_tournament(config: ExperimentConfig, players: Sequence[str], games: int) -> TournamentResult:
    """Round robin: `win_rate[a, b]` is the share of games a won against b."""
    spec = config.duel_spec()
    env = make_env(*spec)
    assert isinstance(env, GridDuel)
    for player in players:
        load_player(player, env)
    n = len(players)
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    jobs = [
        (spec, players[a], players[b], games, derive_seed(config.run.seed, a, b, PURPOSE_MATCH)) for a, b in pairs
    ]
    results = run_jobs(_pair_job, jobs, config.run.workers)
    win_rate = np.full((n, n), np.nan)
    draw_rate = np.full((n, n), np.nan)
    by_pair: Dict[Tuple[int, int], MatchResult] = {}
    for (a, b), result in zip(pairs, results):
        by_pair[(a, b)] = result
        win_rate[a, b] = result.wins / games
        win_rate[b, a] = result.losses / games
        draw_rate[a, b] = draw_rate[b, a] = result.draws / games
    return TournamentResult([str(p) for p in players], win_rate, draw_rate, games, by_pair)


def cmd_eval(config: ExperimentConfig, player_a: str, player_b: str, games: int) -> MatchResult:
    env = make_env(*config.duel_spec())
    assert isinstance(env, GridDuel)
    a = load_player(player_a, env)
    b = load_player(player_b, env)
    return head_to_head(config.duel_spec(), a, b, games, derive_seed(config.run.seed, 0, 0, PURPOSE_MATCH))
