"""
Population-based self-play over risk levels.

A round trains every agent with RPPO against opponents drawn uniformly from the policy pool,
rates the updated agents with round-robin evaluation games, freezes them into the pool and
finally lets underperformers copy the best agent (exploit) and perturb its risk level (explore).

Every step works on copies and the new `PopulationState` is only assembled at the end, so a
failure anywhere in a round leaves the previous state intact.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from rpbt.concurrency import derive_rng, derive_seed, run_jobs
from rpbt.const import (
    ELO_GAMES_PER_PAIR,
    ELO_INITIAL,
    ELO_K,
    EXPLOIT_THRESHOLD,
    INITIAL_TAUS,
    NOISE_BOUND,
    POPULATION_SIZE,
    STEPS_PER_ROUND,
    TAU_MAX,
    TAU_MIN,
)
from rpbt.envs import GridDuel, make_env
from rpbt.model import Actor, DomainError, RpbtError
from rpbt.nn import AdamState
from rpbt.rppo import (
    AgentState,
    PolicySnapshot,
    RppoConfig,
    UpdateDiagnostics,
    collect_rollout,
    create_agent,
    rppo_update,
    snapshot,
)

logger = logging.getLogger(__name__)

# seed purposes
PURPOSE_INIT = 0
PURPOSE_OPPONENTS = 1
PURPOSE_ROLLOUT = 2
PURPOSE_EVAL = 3
PURPOSE_EXPLOIT = 4

EnvSpec = Tuple[str, Dict[str, Any]]


class RoundAbortedError(RpbtError):
    """A job of the round failed; the population is left as it was before the round."""

    def __init__(self, round_index: int, cause: BaseException) -> None:
        super().__init__(f"round {round_index} aborted: {cause}")
        self.round = round_index
        self.cause = cause


@dataclass(frozen=True)
class PoolEntry:
    checkpoint_id: str
    snapshot: PolicySnapshot
    fingerprint: str

    @property
    def agent_id(self) -> int:
        return self.snapshot.agent_id

    @property
    def round(self) -> int:
        return self.snapshot.round

    @property
    def tau(self) -> float:
        return self.snapshot.tau


def checkpoint_id(agent_id: int, round_index: int) -> str:
    return f"r{round_index:04d}-a{agent_id}"


@dataclass(frozen=True)
class PolicyPool:
    """Append-only history of frozen policies. `add` returns a new pool."""

    entries: Tuple[PoolEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> PoolEntry:
        return self.entries[index]

    def add(self, snapshots: Sequence[PolicySnapshot]) -> "PolicyPool":
        added = tuple(PoolEntry(checkpoint_id(s.agent_id, s.round), s, s.fingerprint()) for s in snapshots)
        return PolicyPool(self.entries + added)

    def manifest(self) -> List[Dict[str, Any]]:
        return [
            {
                "id": e.checkpoint_id,
                "agent_id": e.agent_id,
                "round": e.round,
                "tau": e.tau,
                "sha256": e.fingerprint,
            }
            for e in self.entries
        ]


def sample_opponent(pool: PolicyPool, rng: np.random.Generator) -> PoolEntry:
    if not len(pool):
        raise DomainError("cannot sample an opponent from an empty pool")
    return pool[int(rng.integers(len(pool)))]


def elo_expected(r_a: float, r_b: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))


@dataclass(frozen=True)
class EloTable:
    ratings: Tuple[float, ...]
    k: float = ELO_K
    initial: float = ELO_INITIAL

    @classmethod
    def create(cls, n_agents: int, initial: float = ELO_INITIAL, k: float = ELO_K) -> "EloTable":
        return cls(tuple(float(initial) for _ in range(n_agents)), k, initial)

    def __post_init__(self) -> None:
        if not all(math.isfinite(r) for r in self.ratings):
            raise DomainError("ratings must be finite")

    @property
    def total(self) -> float:
        return math.fsum(self.ratings)


VALID_SCORES = (0.0, 0.5, 1.0)


def elo_update(table: EloTable, a: int, b: int, score_a: float) -> EloTable:
    """Rate one game. A moves by K (S_A - E_A); B by K (S_B - E_B), which is exactly the opposite amount."""
    if score_a not in VALID_SCORES:
        raise DomainError(f"score must be one of {VALID_SCORES}, got {score_a!r}")
    n = len(table.ratings)
    if not (0 <= a < n and 0 <= b < n) or a == b:
        raise DomainError(f"cannot rate agents {a} and {b} in a table of {n}")
    delta = table.k * (score_a - elo_expected(table.ratings[a], table.ratings[b]))
    ratings = list(table.ratings)
    ratings[a] += delta
    ratings[b] -= delta
    return replace(table, ratings=tuple(ratings))


@dataclass(frozen=True)
class PopulationSettings:
    size: int = POPULATION_SIZE
    initial_taus: Tuple[float, ...] = INITIAL_TAUS
    exploit_threshold: float = EXPLOIT_THRESHOLD
    noise_bound: float = NOISE_BOUND
    tau_min: float = TAU_MIN
    tau_max: float = TAU_MAX
    elo_k: float = ELO_K
    elo_initial: float = ELO_INITIAL
    elo_games_per_pair: int = ELO_GAMES_PER_PAIR
    steps_per_round: int = STEPS_PER_ROUND
    static_risk: bool = False
    exploit: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "initial_taus", tuple(float(t) for t in self.initial_taus))
        if self.size < 1:
            raise DomainError(f"population size must be at least 1, got {self.size}")
        if len(self.initial_taus) != self.size:
            raise DomainError(f"{len(self.initial_taus)} initial risk levels for a population of {self.size}")
        if not 0.0 < self.tau_min <= self.tau_max < 1.0:
            raise DomainError(f"risk interval [{self.tau_min}, {self.tau_max}] must lie inside (0, 1)")
        for tau in self.initial_taus:
            if not self.tau_min <= tau <= self.tau_max:
                raise DomainError(f"initial risk level {tau} outside [{self.tau_min}, {self.tau_max}]")
        if self.exploit_threshold < 0.0 or self.noise_bound < 0.0:
            raise DomainError("exploit threshold and noise bound must be nonnegative")
        if self.elo_games_per_pair < 0 or self.steps_per_round < 1:
            raise DomainError("game and step counts must be positive")


@dataclass(frozen=True)
class PopulationState:
    agents: Tuple[AgentState, ...]
    elo: EloTable
    pool: PolicyPool
    settings: PopulationSettings
    round: int = 0
    seed: int = 0

    @property
    def taus(self) -> Tuple[float, ...]:
        return tuple(agent.tau for agent in self.agents)


def initial_population(
    settings: PopulationSettings, config: RppoConfig, env_spec: EnvSpec, seed: int
) -> PopulationState:
    env = make_env(*env_spec)
    agents = tuple(
        create_agent(
            agent_id=i,
            config=config.with_tau(tau),
            observation_dim=env.observation_dim,
            action_space=env.action_space,
            seed=derive_seed(seed, 0, i, PURPOSE_INIT),
        )
        for i, tau in enumerate(settings.initial_taus)
    )
    pool = PolicyPool().add([snapshot(agent, 0) for agent in agents])
    elo = EloTable.create(settings.size, settings.elo_initial, settings.elo_k)
    return PopulationState(agents, elo, pool, settings, 0, seed)


def select_champion(pop: PopulationState) -> int:
    """Highest rating; the lowest agent id wins ties."""
    ratings = pop.elo.ratings
    best = max(ratings)
    return next(i for i, r in enumerate(ratings) if r == best)


def perturb_tau(tau: float, noise: float, tau_min: float = TAU_MIN, tau_max: float = TAU_MAX) -> float:
    return float(min(max(tau + noise, tau_min), tau_max))


@dataclass(frozen=True)
class ExploitEvent:
    round: int
    agent_id: int
    source_id: int
    old_tau: float
    copied_tau: float
    new_tau: float

    def to_record(self) -> Dict[str, Any]:
        return {
            "round": self.round,
            "agent_id": self.agent_id,
            "source_id": self.source_id,
            "old_tau": self.old_tau,
            "copied_tau": self.copied_tau,
            "new_tau": self.new_tau,
        }


def exploit_explore(pop: PopulationState, rng: np.random.Generator) -> Tuple[PopulationState, List[ExploitEvent]]:
    settings = pop.settings
    if not settings.exploit:
        return pop, []
    best = select_champion(pop)
    best_rating = pop.elo.ratings[best]
    source = pop.agents[best]
    agents = list(pop.agents)
    events: List[ExploitEvent] = []
    for i, agent in enumerate(pop.agents):
        if i == best or best_rating - pop.elo.ratings[i] <= settings.exploit_threshold:
            continue
        copied_tau = agent.tau if settings.static_risk else source.tau
        new_tau = copied_tau
        if not settings.static_risk:
            new_tau = perturb_tau(
                copied_tau,
                float(rng.uniform(-settings.noise_bound, settings.noise_bound)),
                settings.tau_min,
                settings.tau_max,
            )
        child = agent.clone()
        child.policy = source.policy.copy()
        child.value = source.value.copy()
        child.policy_adam = AdamState.zeros(child.policy)
        child.value_adam = AdamState.zeros(child.value)
        child.config = agent.config.with_tau(new_tau)
        agents[i] = child
        events.append(ExploitEvent(pop.round, i, best, agent.tau, copied_tau, new_tau))
        logger.info("round %d: agent %d copies agent %d, tau %.3f -> %.3f", pop.round, i, best, agent.tau, new_tau)
    return replace(pop, agents=tuple(agents)), events


def play_game(env: GridDuel, seat0: Actor, seat1: Actor, rng: np.random.Generator) -> float:
    """One full game; the score of seat 0 (1 win, 0.5 draw, 0 loss)."""
    observations = env.reset(rng)
    while True:
        results = env.step([seat0.act(observations[0], rng), seat1.act(observations[1], rng)], rng)
        if results[0][2]:
            reward = results[0][1]
            return 1.0 if reward > 0 else 0.0 if reward < 0 else 0.5
        observations = [obs for obs, _, _ in results]


@dataclass
class MatchResult:
    wins: int = 0
    draws: int = 0
    losses: int = 0

    @property
    def games(self) -> int:
        return self.wins + self.draws + self.losses

    @property
    def win_rate(self) -> float:
        return self.wins / self.games if self.games else 0.0

    @property
    def draw_rate(self) -> float:
        return self.draws / self.games if self.games else 0.0

    def record(self, score: float) -> None:
        if score == 1.0:
            self.wins += 1
        elif score == 0.0:
            self.losses += 1
        else:
            self.draws += 1


def head_to_head(env_spec: EnvSpec, player_a: Actor, player_b: Actor, games: int, seed: int) -> MatchResult:
    """`games` plays of A against B, alternating seats; results are from A's side."""
    env = make_env(*env_spec)
    assert isinstance(env, GridDuel)
    rng = np.random.default_rng(seed)
    result = MatchResult()
    for game in range(games):
        if game % 2 == 0:
            result.record(play_game(env, player_a, player_b, rng))
        else:
            result.record(1.0 - play_game(env, player_b, player_a, rng))
    return result


def _pair_scores(env_spec: EnvSpec, player_a: Actor, player_b: Actor, games: int, seed: int) -> List[float]:
    env = make_env(*env_spec)
    rng = np.random.default_rng(seed)
    return [play_game(env, player_a, player_b, rng) for _ in range(games)]  # type: ignore[arg-type]


@dataclass
class AgentRoundResult:
    agent: AgentState
    diagnostics: List[UpdateDiagnostics]
    episode_returns: List[float]


def train_agent_round(
    agent: AgentState, env_spec: EnvSpec, opponents: Sequence[PolicySnapshot], steps: int, seed: int
) -> AgentRoundResult:
    """One agent's share of a round: one rollout and one RPPO update per sampled opponent."""
    rng = np.random.default_rng(seed)
    horizon = agent.config.horizon
    diagnostics: List[UpdateDiagnostics] = []
    returns: List[float] = []
    remaining = steps
    for opponent in opponents:
        env = make_env(*env_spec)
        traj = collect_rollout(agent, env, min(horizon, remaining), rng, opponent)
        agent, update = rppo_update(agent, traj)
        diagnostics.append(update)
        returns.extend(traj.episode_returns)
        remaining -= len(traj)
    return AgentRoundResult(agent, diagnostics, returns)


@dataclass
class RoundReport:
    round: int
    pool_additions: List[str]
    pool_size: int
    ratings: Tuple[float, ...]
    taus_before: Tuple[float, ...]
    taus: Tuple[float, ...]
    champion: int
    exploits: List[ExploitEvent] = field(default_factory=list)
    diagnostics: List[UpdateDiagnostics] = field(default_factory=list)
    mean_returns: Tuple[Optional[float], ...] = ()

    def to_record(self) -> Dict[str, Any]:
        return {
            "round": self.round,
            "pool_additions": self.pool_additions,
            "pool_size": self.pool_size,
            "ratings": list(self.ratings),
            "taus_before": list(self.taus_before),
            "taus": list(self.taus),
            "champion": self.champion,
            "exploits": [e.to_record() for e in self.exploits],
            "mean_returns": list(self.mean_returns),
        }


def run_round(pop: PopulationState, env_spec: EnvSpec, workers: int = 1) -> Tuple[PopulationState, RoundReport]:
    settings = pop.settings
    round_index = pop.round
    n_rollouts = math.ceil(settings.steps_per_round / pop.agents[0].config.horizon)

    # opponents are drawn up front so the draw never depends on scheduling
    jobs = []
    for agent in pop.agents:
        opponent_rng = derive_rng(pop.seed, round_index, agent.agent_id, PURPOSE_OPPONENTS)
        opponents = [sample_opponent(pop.pool, opponent_rng).snapshot for _ in range(n_rollouts)]
        jobs.append(
            (
                agent,
                env_spec,
                opponents,
                settings.steps_per_round,
                derive_seed(pop.seed, round_index, agent.agent_id, PURPOSE_ROLLOUT),
            )
        )
    try:
        results = run_jobs(train_agent_round, jobs, workers)
        agents = tuple(result.agent for result in results)
        next_round = round_index + 1
        snapshots = [snapshot(agent, next_round) for agent in agents]

        pairs = [(a, b) for a in range(len(agents)) for b in range(len(agents)) if a != b]
        eval_jobs = [
            (
                env_spec,
                snapshots[a],
                snapshots[b],
                settings.elo_games_per_pair,
                derive_seed(pop.seed, round_index, a * len(agents) + b, PURPOSE_EVAL),
            )
            for a, b in pairs
        ]
        scores = run_jobs(_pair_scores, eval_jobs, workers)
    except Exception as e:
        raise RoundAbortedError(round_index, e) from e

    elo = pop.elo
    for (a, b), pair_scores in zip(pairs, scores):
        for score in pair_scores:
            elo = elo_update(elo, a, b, score)
    pool = pop.pool.add(snapshots)
    rated = replace(pop, agents=agents, elo=elo, pool=pool)
    explored, events = exploit_explore(rated, derive_rng(pop.seed, round_index, 0, PURPOSE_EXPLOIT))
    final = replace(explored, round=next_round)

    report = RoundReport(
        round=next_round,
        pool_additions=[checkpoint_id(s.agent_id, s.round) for s in snapshots],
        pool_size=len(pool),
        ratings=elo.ratings,
        taus_before=tuple(agent.tau for agent in agents),
        taus=final.taus,
        champion=select_champion(final),
        exploits=events,
        diagnostics=[d for result in results for d in result.diagnostics],
        mean_returns=tuple(float(np.mean(r.episode_returns)) if r.episode_returns else None for r in results),
    )
    logger.info("round %d done: ratings %s, taus %s", next_round, elo.ratings, final.taus)
    return final, report
