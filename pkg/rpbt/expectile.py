"""Exact tabular expectile, worst-case, best-case and multi-step backups and their fixed points."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional

import numpy as np

from rpbt.const import DEFAULT_MAX_ITER, DEFAULT_TOLERANCE
from rpbt.model import DomainError, RiskConfig, RpbtError, TabularMDP, TabularPolicy, TransitionMap, induced_chain

logger = logging.getLogger(__name__)

# types
ValueTable = np.ndarray
Operator = Callable[[np.ndarray], np.ndarray]


class BackupKind(Enum):
    EXPECTILE = "expectile"
    WORST = "worst"
    BEST = "best"
    MULTISTEP = "multistep"


@dataclass
class FixedPointResult:
    values: ValueTable
    iterations: int
    residual: float
    contraction_estimates: List[float] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)


class NonConvergenceError(RpbtError):
    """Raised when a fixed-point solver exhausts its iteration budget.

    `result` holds the partial trace so callers can still inspect the observed ratios.
    """

    def __init__(self, iterations: int, residual: float, result: Optional[FixedPointResult] = None) -> None:
        super().__init__(f"no convergence after {iterations} iterations (last residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual
        self.result = result


def _check_inputs(v: np.ndarray, mdp: TabularMDP, pi: TabularPolicy) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (mdp.n_states,):
        raise DomainError(f"value table has shape {v.shape}, expected ({mdp.n_states},)")
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise DomainError(f"policy has shape {pi.probs.shape}, expected {(mdp.n_states, mdp.n_actions)}")
    if not np.all(np.isfinite(v)):
        raise DomainError("value table has non-finite entries")
    return v


def _asymmetric(delta: np.ndarray, tau: float) -> np.ndarray:
    return tau * np.maximum(delta, 0.0) + (1.0 - tau) * np.minimum(delta, 0.0)


def expectile_backup(v: ValueTable, mdp: TabularMDP, pi: TabularPolicy, cfg: RiskConfig) -> ValueTable:
    """One application of the expectile Bellman operator.

    v(s) + 2 alpha E_{a, s'}[tau [delta]_+ + (1 - tau) [delta]_-] with
    delta = r + gamma v(s') - v(s). Terminal states keep their value.
    """
    v = _check_inputs(v, mdp, pi)
    out = mdp.outcomes
    weight = pi.probs[out.state, out.action] * out.probability
    delta = out.reward + cfg.gamma * v[out.next_state] - v[out.state]
    update = np.bincount(out.state, weights=weight * _asymmetric(delta, cfg.tau), minlength=mdp.n_states)
    new = v + 2.0 * cfg.step_size * update
    new[mdp.terminal_mask] = v[mdp.terminal_mask]
    return new


def _extreme_backup(v: ValueTable, mdp: TabularMDP, pi: TabularPolicy, gamma: float, best: bool) -> ValueTable:
    v = _check_inputs(v, mdp, pi)
    out = mdp.outcomes
    supported = (pi.probs[out.state, out.action] > 0.0) & (out.probability > 0.0)
    target = out.reward[supported] + gamma * v[out.next_state[supported]]
    states = out.state[supported]
    result = np.full(mdp.n_states, -np.inf if best else np.inf)
    if best:
        np.maximum.at(result, states, target)
    else:
        np.minimum.at(result, states, target)
    terminal = mdp.terminal_mask
    result[terminal] = v[terminal]
    missing = ~np.isfinite(result)
    if np.any(missing):
        raise DomainError(f"state {int(np.argmax(missing))} has no supported transition")
    return result


def worst_case_backup(v: ValueTable, mdp: TabularMDP, pi: TabularPolicy, gamma: float) -> ValueTable:
    """min over supported (a, s') of r(s, a, s') + gamma v(s')."""
    return _extreme_backup(v, mdp, pi, gamma, best=False)


def best_case_backup(v: ValueTable, mdp: TabularMDP, pi: TabularPolicy, gamma: float) -> ValueTable:
    """max over supported (a, s') of r(s, a, s') + gamma v(s')."""
    return _extreme_backup(v, mdp, pi, gamma, best=True)


def gamma_tau(cfg: RiskConfig) -> float:
    """Contraction modulus of the expectile operator: 1 - 2 alpha (1 - gamma) min(tau, 1 - tau)."""
    return 1.0 - 2.0 * cfg.step_size * (1.0 - cfg.gamma) * min(cfg.tau, 1.0 - cfg.tau)


def gamma_tau_lambda(cfg: RiskConfig) -> float:
    """Contraction modulus of the multi-step operator: (1 - lambda) g / (1 - lambda g), g = gamma_tau."""
    g = gamma_tau(cfg)
    return (1.0 - cfg.lam) * g / (1.0 - cfg.lam * g)


def default_n_terms(lam: float, tail: float = 1e-12) -> int:
    """Smallest series length whose folded tail weight lambda^(n-1) is at most `tail`."""
    if lam <= 0.0:
        return 1
    return 1 + math.ceil(math.log(tail) / math.log(lam))


def multistep_backup(
    v: ValueTable,
    mdp: TabularMDP,
    pi: TabularPolicy,
    cfg: RiskConfig,
    n_terms: Optional[int] = None,
    operator: Optional[Operator] = None,
) -> ValueTable:
    """Truncated (1 - lambda) sum lambda^(n-1) T^n v.

    The weight of the dropped tail, lambda^(N-1) in total, is carried by the last term so the
    weights sum to one and fixed points of T are preserved exactly.
    """
    if n_terms is None:
        n_terms = default_n_terms(cfg.lam)
    if n_terms < 1:
        raise DomainError(f"n_terms must be at least 1, got {n_terms}")
    if operator is None:

        def operator(values: np.ndarray) -> np.ndarray:
            return expectile_backup(values, mdp, pi, cfg)

    lam = cfg.lam
    current = _check_inputs(v, mdp, pi)
    total = np.zeros_like(current)
    for n in range(1, n_terms + 1):
        current = operator(current)
        weight = lam ** (n - 1) if n == n_terms else (1.0 - lam) * lam ** (n - 1)
        total += weight * current
    return total


def make_operator(
    mdp: TabularMDP,
    pi: TabularPolicy,
    cfg: RiskConfig,
    backup_kind: BackupKind,
    n_terms: Optional[int] = None,
) -> Operator:
    if backup_kind is BackupKind.EXPECTILE:
        return lambda v: expectile_backup(v, mdp, pi, cfg)
    if backup_kind is BackupKind.WORST:
        return lambda v: worst_case_backup(v, mdp, pi, cfg.gamma)
    if backup_kind is BackupKind.BEST:
        return lambda v: best_case_backup(v, mdp, pi, cfg.gamma)
    return lambda v: multistep_backup(v, mdp, pi, cfg, n_terms)


def solve_fixed_point(
    mdp: TabularMDP,
    pi: TabularPolicy,
    cfg: RiskConfig,
    backup_kind: BackupKind = BackupKind.EXPECTILE,
    tol: float = DEFAULT_TOLERANCE,
    max_iter: int = DEFAULT_MAX_ITER,
    *,
    n_terms: Optional[int] = None,
    operator: Optional[Operator] = None,
) -> FixedPointResult:
    """Iterate a backup from v = 0 until the sup-norm change is at most `tol`.

    Records every residual and every ratio of consecutive residuals. `operator` replaces the
    backup selected by `backup_kind`.
    """
    if tol <= 0.0:
        raise DomainError(f"tol must be positive, got {tol!r}")
    if operator is None:
        operator = make_operator(mdp, pi, cfg, backup_kind, n_terms)

    v = np.zeros(mdp.n_states)
    residuals: List[float] = []
    ratios: List[float] = []
    residual = math.inf
    for iteration in range(1, max_iter + 1):
        new = operator(v)
        residual = float(np.max(np.abs(new - v))) if len(v) else 0.0
        if residuals and residuals[-1] > 0.0:
            ratios.append(residual / residuals[-1])
        residuals.append(residual)
        v = new
        if not math.isfinite(residual):
            break
        if residual <= tol:
            logger.debug("%s fixed point after %d iterations", backup_kind.value, iteration)
            return FixedPointResult(v, iteration, residual, ratios, residuals)
    partial = FixedPointResult(v, len(residuals), residual, ratios, residuals)
    raise NonConvergenceError(len(residuals), residual, partial)


def policy_evaluation(mdp: TabularMDP, pi: TabularPolicy, gamma: float) -> ValueTable:
    """Standard expected-value policy evaluation by solving (I - gamma P_pi) v = r_pi."""
    chain, reward = induced_chain(mdp, pi)
    terminal = mdp.terminal_mask
    chain[terminal] = 0.0
    reward[terminal] = 0.0
    return np.linalg.solve(np.eye(mdp.n_states) - gamma * chain, reward)


def solve_expectile_exact(
    mdp: TabularMDP,
    pi: TabularPolicy,
    cfg: RiskConfig,
    tol: float = DEFAULT_TOLERANCE,
    max_iter: int = 200,
) -> FixedPointResult:
    """Fixed point of the expectile operator by iterating its sign pattern.

    For a fixed choice of weight (tau where delta > 0, 1 - tau otherwise) on every supported
    outcome, the fixed-point condition is linear, so each step is one policy-evaluation solve.
    Stops once the expectile backup moves the solution by at most `tol`.
    """
    out = mdp.outcomes
    n = mdp.n_states
    weight = pi.probs[out.state, out.action] * out.probability
    terminal = mdp.terminal_mask
    v = policy_evaluation(mdp, pi, cfg.gamma)
    seen = set()
    residual = math.inf
    for iteration in range(1, max_iter + 1):
        delta = out.reward + cfg.gamma * v[out.next_state] - v[out.state]
        positive = delta > 0.0
        pattern = positive.tobytes()
        coef = weight * np.where(positive, cfg.tau, 1.0 - cfg.tau)
        matrix = np.zeros((n, n))
        np.add.at(matrix, (out.state, out.state), coef)
        np.add.at(matrix, (out.state, out.next_state), -cfg.gamma * coef)
        rhs = np.bincount(out.state, weights=coef * out.reward, minlength=n)
        matrix[terminal] = 0.0
        matrix[terminal, terminal] = 1.0
        rhs[terminal] = 0.0
        v = np.linalg.solve(matrix, rhs)
        residual = float(np.max(np.abs(expectile_backup(v, mdp, pi, cfg) - v)))
        if residual <= tol:
            return FixedPointResult(v, iteration, residual, [], [residual])
        if pattern in seen:
            break
        seen.add(pattern)
    raise NonConvergenceError(max_iter, residual)


def advantage_exact(v: ValueTable, mdp: TabularMDP, pi: TabularPolicy, cfg: RiskConfig) -> np.ndarray:
    """A(s, a) = 2 alpha E_{s'}[tau [delta]_+ + (1 - tau) [delta]_-], shape (n_states, n_actions)."""
    v = _check_inputs(v, mdp, pi)
    out = mdp.outcomes
    delta = out.reward + cfg.gamma * v[out.next_state] - v[out.state]
    table = np.zeros((mdp.n_states, mdp.n_actions))
    np.add.at(table, (out.state, out.action), out.probability * _asymmetric(delta, cfg.tau))
    table[mdp.terminal_mask] = 0.0
    return 2.0 * cfg.step_size * table


def random_mdp(
    rng: np.random.Generator,
    max_states: int = 10,
    max_actions: int = 3,
    max_successors: int = 3,
    terminal_probability: float = 0.2,
    reward_bound: float = 1.0,
) -> TabularMDP:
    """Random finite MDP; state 0 is never terminal and rewards are uniform in [-bound, bound]."""
    n_states = int(rng.integers(2, max_states + 1))
    n_actions = int(rng.integers(1, max_actions + 1))
    terminal = [False] + [bool(rng.random() < terminal_probability) for _ in range(n_states - 1)]
    transitions: TransitionMap = {}
    for s in range(n_states):
        for a in range(n_actions):
            if terminal[s]:
                transitions[(s, a)] = ((s, 1.0, 0.0),)
                continue
            k = int(rng.integers(1, min(max_successors, n_states) + 1))
            successors = rng.choice(n_states, size=k, replace=False)
            probabilities = rng.dirichlet(np.ones(k))
            rewards = rng.uniform(-reward_bound, reward_bound, size=k)
            transitions[(s, a)] = tuple(
                (int(n), float(p), float(r)) for n, p, r in zip(successors, probabilities, rewards)
            )
    return TabularMDP(n_states, n_actions, transitions, tuple(terminal))


def random_policy(rng: np.random.Generator, mdp: TabularMDP, deterministic: bool = False) -> TabularPolicy:
    if deterministic:
        return TabularPolicy.deterministic(rng.integers(0, mdp.n_actions, size=mdp.n_states), mdp.n_actions)
    probs = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


def bernoulli_bandit(p: float = 0.5) -> TabularMDP:
    """One decision state with a single action; reward 1 with probability `p`, else 0, then terminate."""
    return TabularMDP(
        n_states=3,
        n_actions=1,
        transitions={
            (0, 0): ((1, 1.0 - p, 0.0), (2, p, 1.0)),
            (1, 0): ((1, 1.0, 0.0),),
            (2, 0): ((2, 1.0, 0.0),),
        },
        terminal=(False, True, True),
    )
