"""
Risk-sensitive PPO: rollout collection, expectile advantages, clipped policy update, value regression.

An `AgentState` owns everything that changes during training. `rppo_update` is functional: it
returns a new state and leaves its input untouched, so a population round can discard all
updates if any agent fails.
"""
import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from rpbt.advantage import compute_advantages
from rpbt.const import (
    CLIP_EPSILON,
    ENTROPY_COEF,
    HIDDEN_SIZES,
    MAX_GRAD_NORM,
    MINIBATCH_SIZE,
    TOY_BATCH_SIZE,
    TOY_LEARNING_RATE,
    UPDATE_EPOCHS,
    VALUE_COEF,
)
from rpbt.model import (
    ActionSpace,
    Actor,
    DomainError,
    Environment,
    MarkovGameEnv,
    RiskConfig,
    RpbtError,
    SpaceKind,
    Trajectory,
)
from rpbt.nn import (
    AdamState,
    Batch,
    HeadKind,
    LossKind,
    LossSpec,
    MlpSpec,
    ParamVector,
    PolicyHead,
    adam_step,
    clip_action,
    clip_grad_norm,
    forward,
    init_params,
    log_prob,
    loss_and_grad,
    policy_logits,
    sample,
)

logger = logging.getLogger(__name__)


class NonFiniteLossError(RpbtError):
    """Raised when a loss or gradient stops being finite; `diagnostics` describes the failing minibatch."""

    def __init__(self, message: str, diagnostics: Dict[str, Any]) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class RppoConfig:
    risk: RiskConfig = field(default_factory=RiskConfig)
    clip_epsilon: float = CLIP_EPSILON
    update_epochs: int = UPDATE_EPOCHS
    entropy_coef: float = ENTROPY_COEF
    value_coef: float = VALUE_COEF
    learning_rate: float = TOY_LEARNING_RATE
    horizon: int = TOY_BATCH_SIZE
    minibatch_size: int = MINIBATCH_SIZE
    normalize_advantages: bool = True
    hidden_sizes: Tuple[int, ...] = HIDDEN_SIZES
    max_grad_norm: Optional[float] = MAX_GRAD_NORM

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not self.clip_epsilon > 0.0:
            raise DomainError(f"clip_epsilon must be positive, got {self.clip_epsilon!r}")
        if self.update_epochs < 1:
            raise DomainError(f"update_epochs must be at least 1, got {self.update_epochs}")
        if self.horizon < 1:
            raise DomainError(f"horizon must be at least 1, got {self.horizon}")
        if self.minibatch_size < 1:
            raise DomainError(f"minibatch_size must be at least 1, got {self.minibatch_size}")
        if not self.learning_rate > 0.0:
            raise DomainError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if self.entropy_coef < 0.0 or self.value_coef < 0.0:
            raise DomainError("loss coefficients must be nonnegative")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0.0:
            raise DomainError(f"max_grad_norm must be positive, got {self.max_grad_norm!r}")

    @property
    def tau(self) -> float:
        return self.risk.tau

    def with_tau(self, tau: float) -> "RppoConfig":
        return replace(self, risk=self.risk.with_tau(tau))


def head_for(space: ActionSpace) -> PolicyHead:
    if space.kind is SpaceKind.DISCRETE:
        return PolicyHead(HeadKind.CATEGORICAL, space.dim)
    return PolicyHead(HeadKind.GAUSSIAN, space.dim, space.low, space.high)


@dataclass
class AgentState:
    """One learner. Its risk level lives only in `config.risk.tau`."""

    agent_id: int
    config: RppoConfig
    policy_spec: MlpSpec
    value_spec: MlpSpec
    head: PolicyHead
    policy: ParamVector
    value: ParamVector
    policy_adam: AdamState
    value_adam: AdamState
    rng: np.random.Generator
    seed: int = 0
    step: int = 0
    updates: int = 0

    @property
    def tau(self) -> float:
        return self.config.tau

    def clone(self) -> "AgentState":
        return AgentState(
            agent_id=self.agent_id,
            config=self.config,
            policy_spec=self.policy_spec,
            value_spec=self.value_spec,
            head=self.head,
            policy=self.policy.copy(),
            value=self.value.copy(),
            policy_adam=self.policy_adam.copy(),
            value_adam=self.value_adam.copy(),
            rng=copy.deepcopy(self.rng),
            seed=self.seed,
            step=self.step,
            updates=self.updates,
        )


def create_agent(
    agent_id: int, config: RppoConfig, observation_dim: int, action_space: ActionSpace, seed: int
) -> AgentState:
    rng = np.random.default_rng(seed)
    head = head_for(action_space)
    policy_spec = MlpSpec(observation_dim, head.dim, config.hidden_sizes)
    value_spec = MlpSpec(observation_dim, 1, config.hidden_sizes)
    # small output layer: near-uniform initial policy
    policy = init_params(policy_spec, rng, head, output_gain=0.01)
    value = init_params(value_spec, rng)
    return AgentState(
        agent_id=agent_id,
        config=config,
        policy_spec=policy_spec,
        value_spec=value_spec,
        head=head,
        policy=policy,
        value=value,
        policy_adam=AdamState.zeros(policy),
        value_adam=AdamState.zeros(value),
        rng=rng,
        seed=seed,
    )


@dataclass(frozen=True)
class PolicySnapshot:
    """Frozen copy of an agent's policy; acts as an opponent or evaluation player."""

    agent_id: int
    round: int
    tau: float
    spec: MlpSpec
    head: PolicyHead
    params: ParamVector

    def __post_init__(self) -> None:
        data = self.params.data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "params", ParamVector(data, self.params.layout))

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> Union[int, np.ndarray]:
        logits = policy_logits(self.params, self.spec, self.head, obs)
        return clip_action(self.head, sample(self.head, logits, rng))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.params.data.tobytes()).hexdigest()


def snapshot(agent: AgentState, round_index: int = 0) -> PolicySnapshot:
    return PolicySnapshot(agent.agent_id, round_index, agent.tau, agent.policy_spec, agent.head, agent.policy)


def collect_rollout(
    agent: AgentState,
    env: Union[Environment, MarkovGameEnv],
    horizon: int,
    rng: np.random.Generator,
    opponent: Optional[Actor] = None,
) -> Trajectory:
    """Run the agent for exactly `horizon` steps, resetting the env whenever an episode ends.

    With an `opponent` the env is a two-player game: the agent plays seat 0 and the opponent acts
    on seat 1's observation. An episode in progress when this returns is resumed by the next call.
    """
    if horizon < 1:
        raise DomainError(f"horizon must be at least 1, got {horizon}")
    two_player = opponent is not None
    obs_rows: List[np.ndarray] = []
    actions: List[Any] = []
    rewards: List[float] = []
    values: List[float] = []
    log_probs: List[float] = []
    dones: List[bool] = []
    opponent_rewards: List[float] = []
    episode_returns: List[float] = []

    def current() -> Any:
        if env.needs_reset:
            return env.reset(rng)
        return env.observe()

    episode_return = 0.0
    for _ in range(horizon):
        observation = current()
        own = observation[0] if two_player else observation
        logits = policy_logits(agent.policy, agent.policy_spec, agent.head, own)
        action = sample(agent.head, logits, rng)
        obs_rows.append(np.asarray(own, dtype=np.float64))
        actions.append(action)
        log_probs.append(float(log_prob(agent.head, logits, action)))
        values.append(float(forward(agent.value, agent.value_spec, own)[0]))
        if two_player:
            assert opponent is not None
            other = opponent.act(observation[1], rng)
            results = env.step([clip_action(agent.head, action), other], rng)  # type: ignore[list-item]
            _, reward, done = results[0]
            opponent_rewards.append(float(results[1][1]))
        else:
            _, reward, done = env.step(clip_action(agent.head, action), rng)  # type: ignore[arg-type]
        rewards.append(float(reward))
        dones.append(bool(done))
        episode_return += float(reward)
        if done:
            episode_returns.append(episode_return)
            episode_return = 0.0

    bootstrap = 0.0
    if not dones[-1]:
        following = current()
        own = following[0] if two_player else following
        bootstrap = float(forward(agent.value, agent.value_spec, own)[0])
    return Trajectory(
        obs=np.stack(obs_rows),
        actions=np.asarray(actions),
        rewards=np.asarray(rewards),
        values=np.asarray(values),
        log_probs=np.asarray(log_probs),
        dones=np.asarray(dones),
        bootstrap_value=bootstrap,
        opponent_rewards=np.asarray(opponent_rewards) if two_player else None,
        episode_returns=episode_returns,
    )


@dataclass
class UpdateDiagnostics:
    agent_id: int
    step: int
    update: int
    tau: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    grad_norm: float
    mean_advantage: float
    episodes: int
    mean_episode_return: Optional[float]

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


def _normalize(advantages: np.ndarray) -> np.ndarray:
    if len(advantages) < 2:
        return advantages - advantages.mean()
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def rppo_update(agent: AgentState, traj: Trajectory) -> Tuple[AgentState, UpdateDiagnostics]:
    """K epochs of shuffled minibatch updates on one trajectory. Returns a new agent; `agent` is unchanged."""
    cfg = agent.config
    estimate = compute_advantages(traj, cfg.risk)
    advantages = _normalize(estimate.advantages) if cfg.normalize_advantages else estimate.advantages
    batch = Batch(
        obs=traj.obs,
        actions=traj.actions,
        advantages=advantages,
        old_log_probs=traj.log_probs,
        targets=estimate.targets,
    )
    surrogate = LossSpec(LossKind.CLIPPED_SURROGATE, cfg.clip_epsilon, cfg.entropy_coef)
    regression = LossSpec(LossKind.VALUE_MSE)

    new = agent.clone()
    totals: Dict[str, float] = {}
    count = 0
    size = len(traj)
    for epoch in range(cfg.update_epochs):
        order = new.rng.permutation(size)
        for start in range(0, size, cfg.minibatch_size):
            minibatch = batch.subset(order[start : start + cfg.minibatch_size])
            try:
                policy_result = loss_and_grad(new.policy, new.policy_spec, new.head, minibatch, surrogate)
                value_result = loss_and_grad(new.value, new.value_spec, None, minibatch, regression)
            except DomainError as e:
                raise NonFiniteLossError(
                    f"agent {agent.agent_id}: {e}", {"step": agent.step, "epoch": epoch, "minibatch_start": start}
                ) from e
            stats = {**policy_result.stats, **value_result.stats}
            if not all(math.isfinite(v) for v in (policy_result.loss, value_result.loss, *stats.values())):
                raise NonFiniteLossError(
                    f"agent {agent.agent_id}: non-finite loss at epoch {epoch}",
                    {"step": agent.step, "epoch": epoch, "minibatch_start": start, **stats},
                )
            policy_grad, grad_norm = clip_grad_norm(policy_result.grad, cfg.max_grad_norm)
            value_grad = ParamVector(value_result.grad.data * cfg.value_coef, value_result.grad.layout)
            value_grad, _ = clip_grad_norm(value_grad, cfg.max_grad_norm)
            try:
                new.policy, new.policy_adam = adam_step(new.policy, policy_grad, new.policy_adam, cfg.learning_rate)
                new.value, new.value_adam = adam_step(new.value, value_grad, new.value_adam, cfg.learning_rate)
            except DomainError as e:
                raise NonFiniteLossError(f"agent {agent.agent_id}: {e}", {"step": agent.step, "epoch": epoch}) from e
            stats["grad_norm"] = grad_norm
            for key, value in stats.items():
                totals[key] = totals.get(key, 0.0) + value
            count += 1

    new.step = agent.step + size
    new.updates = agent.updates + 1
    means = {key: value / count for key, value in totals.items()}
    diagnostics = UpdateDiagnostics(
        agent_id=agent.agent_id,
        step=new.step,
        update=new.updates,
        tau=agent.tau,
        policy_loss=means["policy_loss"],
        value_loss=means["value_loss"],
        entropy=means["entropy"],
        clip_fraction=means["clip_fraction"],
        approx_kl=means["approx_kl"],
        grad_norm=means["grad_norm"],
        mean_advantage=float(estimate.advantages.mean()),
        episodes=len(traj.episode_returns),
        mean_episode_return=float(np.mean(traj.episode_returns)) if traj.episode_returns else None,
    )
    logger.debug("agent %d update %d: %s", agent.agent_id, new.updates, diagnostics)
    return new, diagnostics


def train(
    agent: AgentState,
    env: Union[Environment, MarkovGameEnv],
    total_steps: int,
    on_update: Optional[Callable[[UpdateDiagnostics], None]] = None,
    opponent_for: Optional[Callable[[AgentState], Actor]] = None,
) -> AgentState:
    """Collect and update until `agent.step` reaches `total_steps`. All randomness comes from `agent.rng`."""
    while agent.step < total_steps:
        opponent = opponent_for(agent) if opponent_for is not None else None
        traj = collect_rollout(agent, env, agent.config.horizon, agent.rng, opponent)
        agent, diagnostics = rppo_update(agent, traj)
        if on_update is not None:
            on_update(diagnostics)
    return agent
