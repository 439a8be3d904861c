"""Shared domain types: finite MDPs, tabular policies, trajectories, risk configuration.

Everything here is an immutable value object after construction. Arrays handed to the
constructors are copied and marked read-only.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from rpbt.const import DEFAULT_N_MAX, PROBABILITY_ATOL

# types
State = int
Action = int
Outcome = Tuple[State, float, float]  # (next state, probability, reward)
TransitionMap = Dict[Tuple[State, Action], Tuple[Outcome, ...]]


class RpbtError(Exception):
    """Base class for every error raised by this package."""


class DomainError(RpbtError, ValueError):
    """Raised when an argument lies outside the domain an operation is defined on."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def default_alpha(tau: float) -> float:
    """Largest stable step size for the expectile update: 1 / (2 max(tau, 1 - tau))."""
    if not 0.0 < tau < 1.0 or math.isnan(tau):
        raise DomainError(f"tau must lie in (0, 1), got {tau!r}")
    return 1.0 / (2.0 * max(tau, 1.0 - tau))


@dataclass(frozen=True)
class RiskConfig:
    """Risk level and the estimator constants threaded through every expectile computation.

    `alpha=None` resolves to `default_alpha(tau)`.
    """

    tau: float = 0.5
    alpha: Optional[float] = None
    gamma: float = 0.99
    lam: float = 0.95
    n_max: int = DEFAULT_N_MAX

    def __post_init__(self) -> None:
        bound = default_alpha(self.tau)
        if self.alpha is None:
            object.__setattr__(self, "alpha", bound)
        alpha = self.alpha
        assert alpha is not None
        if not 0.0 < alpha <= bound * (1.0 + 1e-12):
            raise DomainError(f"alpha must lie in (0, {bound}] for tau={self.tau}, got {alpha!r}")
        if not 0.0 < self.gamma < 1.0:
            raise DomainError(f"gamma must lie in (0, 1), got {self.gamma!r}")
        if not 0.0 <= self.lam < 1.0:
            raise DomainError(f"lambda must lie in [0, 1), got {self.lam!r}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise DomainError(f"n_max must be a positive integer, got {self.n_max!r}")

    @property
    def step_size(self) -> float:
        assert self.alpha is not None
        return self.alpha

    def with_tau(self, tau: float) -> "RiskConfig":
        """Same constants at a new risk level; alpha is re-derived when it was defaulted."""
        alpha = None if math.isclose(self.step_size, default_alpha(self.tau)) else self.step_size
        return RiskConfig(tau=tau, alpha=alpha, gamma=self.gamma, lam=self.lam, n_max=self.n_max)


@dataclass(frozen=True)
class TabularMDP:
    """Finite MDP with explicit stochastic transitions and rewards on (s, a, s') triples.

    Terminal states are absorbing zero-reward self-loops.
    """

    n_states: int
    n_actions: int
    transitions: TransitionMap
    terminal: Tuple[bool, ...] = ()

    def __post_init__(self) -> None:
        if not self.terminal:
            object.__setattr__(self, "terminal", (False,) * self.n_states)
        else:
            object.__setattr__(self, "terminal", tuple(bool(t) for t in self.terminal))
        object.__setattr__(
            self,
            "transitions",
            {(int(s), int(a)): tuple((int(n), float(p), float(r)) for n, p, r in outs)
             for (s, a), outs in self.transitions.items()},
        )

    @classmethod
    def from_arrays(
        cls, probabilities: np.ndarray, rewards: np.ndarray, terminal: Optional[Sequence[bool]] = None
    ) -> "TabularMDP":
        """Build from dense P[s, a, s'] and R[s, a, s'] arrays; zero-probability entries are dropped."""
        probabilities = np.asarray(probabilities, dtype=np.float64)
        rewards = np.broadcast_to(np.asarray(rewards, dtype=np.float64), probabilities.shape)
        n_states, n_actions, _ = probabilities.shape
        transitions: TransitionMap = {}
        for s in range(n_states):
            for a in range(n_actions):
                transitions[(s, a)] = tuple(
                    (n, float(probabilities[s, a, n]), float(rewards[s, a, n]))
                    for n in range(n_states)
                    if probabilities[s, a, n] != 0.0
                )
        return cls(n_states, n_actions, transitions, tuple(terminal) if terminal is not None else ())

    @cached_property
    def outcomes(self) -> "OutcomeArrays":
        """Flattened (s, a, s', p, r) rows in (s, a) order, the substrate of the vectorised backups."""
        rows = [
            (s, a, n, p, r)
            for (s, a), outs in sorted(self.transitions.items())
            for n, p, r in outs
        ]
        if not rows:
            empty_i = np.zeros(0, dtype=np.int64)
            empty_f = np.zeros(0, dtype=np.float64)
            return OutcomeArrays(empty_i, empty_i, empty_i, empty_f, empty_f)
        s, a, n, p, r = zip(*rows)
        return OutcomeArrays(
            state=_frozen(np.array(s, dtype=np.int64)),
            action=_frozen(np.array(a, dtype=np.int64)),
            next_state=_frozen(np.array(n, dtype=np.int64)),
            probability=_frozen(np.array(p, dtype=np.float64)),
            reward=_frozen(np.array(r, dtype=np.float64)),
        )

    @cached_property
    def terminal_mask(self) -> np.ndarray:
        return _frozen(np.array(self.terminal, dtype=bool))

    @property
    def is_deterministic(self) -> bool:
        return all(len(outs) == 1 for outs in self.transitions.values())


@dataclass(frozen=True)
class OutcomeArrays:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    probability: np.ndarray
    reward: np.ndarray


@dataclass(frozen=True)
class TabularPolicy:
    """Per-state action distribution, shape (n_states, n_actions)."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise DomainError(f"policy table must be 2-D, got shape {probs.shape}")
        if np.any(probs < 0.0):
            raise DomainError("policy probabilities must be nonnegative")
        sums = probs.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > PROBABILITY_ATOL):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise DomainError(f"policy row {bad} sums to {sums[bad]!r}, expected 1")
        object.__setattr__(self, "probs", _frozen(probs))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "TabularPolicy":
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), np.asarray(actions)] = 1.0
        return cls(probs)


def validate_mdp(mdp: TabularMDP) -> List[str]:
    """Return every violated invariant of `mdp` as a message. An empty list means valid."""
    problems: List[str] = []
    if mdp.n_states < 1:
        problems.append(f"n_states must be positive, got {mdp.n_states}")
    if mdp.n_actions < 1:
        problems.append(f"n_actions must be positive, got {mdp.n_actions}")
    if len(mdp.terminal) != mdp.n_states:
        problems.append(f"terminal flags: expected {mdp.n_states}, got {len(mdp.terminal)}")
    for (s, a) in mdp.transitions:
        if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions):
            problems.append(f"transition key ({s}, {a}) out of range")
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            outs = mdp.transitions.get((s, a))
            if not outs:
                problems.append(f"({s}, {a}): no outgoing transitions")
                continue
            total = 0.0
            for n, p, r in outs:
                if not 0 <= n < mdp.n_states:
                    problems.append(f"({s}, {a}): successor {n} out of range")
                if p < 0.0:
                    problems.append(f"({s}, {a}) -> {n}: negative probability {p!r}")
                if not (math.isfinite(p) and math.isfinite(r)):
                    problems.append(f"({s}, {a}) -> {n}: non-finite probability or reward")
                total += p
            if abs(total - 1.0) > PROBABILITY_ATOL:
                problems.append(f"({s}, {a}): probabilities sum to {total!r}, expected 1")
            is_terminal = s < len(mdp.terminal) and mdp.terminal[s]
            if is_terminal and any(n != s or r != 0.0 for n, p, r in outs if p > 0.0):
                problems.append(f"({s}, {a}): terminal state must be a zero-reward self-loop")
    return problems


def induced_chain(mdp: TabularMDP, pi: TabularPolicy) -> Tuple[np.ndarray, np.ndarray]:
    """Markov chain P_pi[s, s'] and expected one-step reward r_pi[s] under `pi`."""
    out = mdp.outcomes
    weight = pi.probs[out.state, out.action] * out.probability
    chain = np.zeros((mdp.n_states, mdp.n_states))
    np.add.at(chain, (out.state, out.next_state), weight)
    reward = np.bincount(out.state, weights=weight * out.reward, minlength=mdp.n_states)
    return chain, reward


class SpaceKind(Enum):
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class ActionSpace:
    kind: SpaceKind
    dim: int
    low: float = -1.0
    high: float = 1.0


@dataclass
class Trajectory:
    """Time-ordered rollout records; `done[t]` closes an episode at step t.

    `values` and `log_probs` are recorded by the collecting (pre-update) policy and the
    `bootstrap_value` estimates the state after the final step.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    bootstrap_value: float = 0.0
    opponent_rewards: Optional[np.ndarray] = None
    episode_returns: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        self.actions = np.asarray(self.actions)
        length = len(self.rewards)
        for name in ("obs", "actions", "values", "log_probs", "dones"):
            if len(getattr(self, name)) != length:
                raise DomainError(f"trajectory field {name!r} has length {len(getattr(self, name))}, expected {length}")
        if not math.isfinite(self.bootstrap_value):
            raise DomainError("bootstrap value must be finite")

    def __len__(self) -> int:
        return len(self.rewards)

    def steps_to_end(self) -> np.ndarray:
        """d_t: number of steps from t to the end of its episode segment, inclusive of t."""
        length = len(self)
        remaining = np.zeros(length, dtype=np.int64)
        count = 0
        for t in range(length - 1, -1, -1):
            count = 1 if self.dones[t] else count + 1
            remaining[t] = count
        return remaining


class Actor(Protocol):
    """Anything that picks an action for one observation."""

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> Any:
        ...


class Environment(Protocol):
    """Single-agent episodic environment driven by an explicit numpy Generator.

    `needs_reset` is true before the first episode and after `done`; `observe()` returns the
    current observation of an episode in progress.
    """

    observation_dim: int
    action_space: ActionSpace
    needs_reset: bool

    def observe(self) -> np.ndarray:
        ...

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        ...

    def step(self, action: int, rng: np.random.Generator) -> Tuple[np.ndarray, float, bool]:
        ...


class MarkovGameEnv(Protocol):
    """Symmetric two-player game; all players terminate on the same step."""

    n_players: int
    observation_dim: int
    action_space: ActionSpace
    reward_sum: float
    needs_reset: bool

    def observe(self) -> List[np.ndarray]:
        ...

    def reset(self, rng: np.random.Generator) -> List[np.ndarray]:
        ...

    def step(self, actions: Sequence[int], rng: np.random.Generator) -> List[Tuple[np.ndarray, float, bool]]:
        ...
