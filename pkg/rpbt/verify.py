"""
Property suites for the exact operators, the advantage estimator and the network gradients.

Each check draws its inputs from a seeded generator and returns a `CheckResult` listing every
violation it found. `run_verify` runs them in order and feeds a `Report`.
"""
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from rpbt.advantage import build_return_table, compute_advantages, gae_advantages
from rpbt.concurrency import run_jobs
from rpbt.config import ConfigError, ExperimentConfig
from rpbt.const import CONTRACTION_SLACK
from rpbt.expectile import (
    BackupKind,
    FixedPointResult,
    NonConvergenceError,
    Operator,
    bernoulli_bandit,
    expectile_backup,
    gamma_tau,
    gamma_tau_lambda,
    multistep_backup,
    random_mdp,
    random_policy,
    solve_expectile_exact,
    solve_fixed_point,
)
from rpbt.experiments import evaluate_toy_agent, toy_agent, toy_job, toy_ordering
from rpbt.mdpfile import MdpFormatError, load_mdp
from rpbt.model import RiskConfig, TabularMDP, TabularPolicy, Trajectory, validate_mdp
from rpbt.nn import (
    Activation,
    Batch,
    HeadKind,
    LossKind,
    LossSpec,
    MlpSpec,
    PolicyHead,
    gradient_check,
    init_params,
    log_prob,
    policy_logits,
)
from rpbt.report import CheckResult, Report

logger = logging.getLogger(__name__)

TAU_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
TOWARD_WORST = (0.2, 0.1, 0.05, 0.01, 0.001)
TOWARD_BEST = (0.8, 0.9, 0.95, 0.99, 0.999)
EPS = float(np.finfo(np.float64).eps)

CHECK_NAMES = (
    "contraction",
    "monotonicity in tau",
    "worst/best-case limits",
    "multi-step operator",
    "GAE recovery",
    "gradient correctness",
    "gridworld risk ordering",
)


@dataclass(frozen=True)
class VerifySettings:
    seed: int = 0
    n_mdps: int = 100
    gammas: Tuple[float, ...] = (0.8, 0.9, 0.95)
    taus: Tuple[float, ...] = TAU_GRID
    sweeps: int = 60
    multistep_mdps: int = 10
    multistep_taus: Tuple[float, ...] = (0.3, 0.7)
    multistep_gamma: float = 0.8
    lambdas: Tuple[float, ...] = (0.3, 0.7, 0.95)
    gradient_seeds: int = 20
    inject_fault: bool = False
    toy: bool = False
    toy_steps: int = 200_000
    toy_seeds: Tuple[int, ...] = (0, 1, 2)
    toy_taus: Tuple[float, ...] = (0.2, 0.5, 0.8)
    workers: int = 1
    mdps: Tuple[TabularMDP, ...] = ()


def load_user_mdps(paths: Iterable[Union[str, Path]]) -> Tuple[TabularMDP, ...]:
    """Read MDP definition files for the operator suites. Unreadable or invalid files are configuration errors."""
    loaded = []
    for path in paths:
        try:
            mdp = load_mdp(path)
        except MdpFormatError as e:
            raise ConfigError(f"--mdp {path}", str(e)) from None
        problems = validate_mdp(mdp)
        if problems:
            raise ConfigError(f"--mdp {path}", "; ".join(problems))
        logger.info("loaded %s: %d states, %d actions", path, mdp.n_states, mdp.n_actions)
        loaded.append(mdp)
    return tuple(loaded)


def overshooting_backup(mdp: TabularMDP, pi: TabularPolicy, cfg: RiskConfig, factor: float = 4.0) -> Operator:
    """The expectile backup with its step size multiplied by `factor`, past the stable bound."""

    def operator(v: np.ndarray) -> np.ndarray:
        return v + factor * (expectile_backup(v, mdp, pi, cfg) - v)

    return operator


def _mdp_suite(settings: VerifySettings, count: Optional[int] = None) -> List[Tuple[TabularMDP, TabularPolicy]]:
    rng = np.random.default_rng(settings.seed)
    suite = []
    for _ in range(count if count is not None else settings.n_mdps):
        mdp = random_mdp(rng)
        suite.append((mdp, random_policy(rng, mdp)))
    # files given on the command line are followed under the uniform policy
    suite.extend((mdp, TabularPolicy.uniform(mdp.n_states, mdp.n_actions)) for mdp in settings.mdps)
    return suite


def _trace(
    mdp: TabularMDP, pi: TabularPolicy, cfg: RiskConfig, sweeps: int, operator: Optional[Operator] = None, **kwargs
) -> FixedPointResult:
    """The first `sweeps` iterations of a fixed-point solve, whether or not it converged."""
    try:
        return solve_fixed_point(mdp, pi, cfg, tol=1e-14, max_iter=sweeps, operator=operator, **kwargs)
    except NonConvergenceError as e:
        assert e.result is not None
        return e.result


def ratio_violations(trace: FixedPointResult, modulus: float, value_scale: float) -> List[Tuple[int, float, float]]:
    """(iteration, observed ratio, allowed ratio) for every step that contracts by less than `modulus`.

    Rounding in a backup is about eps * |v|, so each ratio gets an allowance of
    64 eps (1 + value_scale) / previous residual on top of the fixed slack.
    """
    violations = []
    residuals = trace.residuals
    for k in range(1, len(residuals)):
        previous, current = residuals[k - 1], residuals[k]
        if previous == 0.0:
            continue
        allowed = modulus + CONTRACTION_SLACK + 64.0 * EPS * (1.0 + value_scale) / previous
        ratio = current / previous
        if not ratio <= allowed:
            violations.append((k, ratio, allowed))
    return violations


def _value_scale(mdp: TabularMDP, gamma: float) -> float:
    rewards = mdp.outcomes.reward
    bound = float(np.max(np.abs(rewards))) if len(rewards) else 0.0
    return 2.0 * bound / (1.0 - gamma)


def _fixed_point(mdp: TabularMDP, pi: TabularPolicy, cfg: RiskConfig) -> np.ndarray:
    try:
        return solve_expectile_exact(mdp, pi, cfg).values
    except NonConvergenceError:
        pass
    try:
        return solve_fixed_point(mdp, pi, cfg).values
    except NonConvergenceError as e:
        logger.warning("tau=%s, gamma=%s: %s; using the last iterate", cfg.tau, cfg.gamma, e)
        assert e.result is not None
        return e.result.values


def check_contraction(settings: VerifySettings) -> List[str]:
    problems = []
    for index, (mdp, pi) in enumerate(_mdp_suite(settings)):
        for gamma in settings.gammas:
            for tau in settings.taus:
                cfg = RiskConfig(tau=tau, gamma=gamma)
                operator = overshooting_backup(mdp, pi, cfg) if settings.inject_fault else None
                trace = _trace(mdp, pi, cfg, settings.sweeps, operator)
                if not all(math.isfinite(r) for r in trace.residuals):
                    problems.append(f"mdp {index}, gamma={gamma}, tau={tau}: iterates diverged")
                    continue
                for k, ratio, allowed in ratio_violations(trace, gamma_tau(cfg), _value_scale(mdp, gamma)):
                    problems.append(
                        f"mdp {index}, gamma={gamma}, tau={tau}, sweep {k}: ratio {ratio:.6f} > {allowed:.6f}"
                    )
                    break
    return problems


def check_monotonicity(settings: VerifySettings) -> List[str]:
    problems = []
    for index, (mdp, pi) in enumerate(_mdp_suite(settings)):
        for gamma in settings.gammas:
            previous = None
            for tau in sorted(settings.taus):
                values = _fixed_point(mdp, pi, RiskConfig(tau=tau, gamma=gamma))
                if previous is not None and np.any(values < previous - 1e-8):
                    gap = float(np.max(previous - values))
                    problems.append(f"mdp {index}, gamma={gamma}: value drops by {gap:.3e} at tau={tau}")
                previous = values
    return problems


def check_limits(settings: VerifySettings) -> List[str]:
    problems = []
    for index, (mdp, pi) in enumerate(_mdp_suite(settings)):
        for gamma in settings.gammas:
            cfg = RiskConfig(gamma=gamma)
            worst = solve_fixed_point(mdp, pi, cfg, BackupKind.WORST).values
            best = solve_fixed_point(mdp, pi, cfg, BackupKind.BEST).values
            for tau in settings.taus:
                values = _fixed_point(mdp, pi, cfg.with_tau(tau))
                if np.any(values < worst - 1e-8) or np.any(values > best + 1e-8):
                    problems.append(f"mdp {index}, gamma={gamma}, tau={tau}: outside the worst/best envelope")
            for path, limit, label in ((TOWARD_WORST, worst, "worst"), (TOWARD_BEST, best, "best")):
                distances = [float(np.max(np.abs(_fixed_point(mdp, pi, cfg.with_tau(t)) - limit))) for t in path]
                for (t0, d0), (t1, d1) in zip(zip(path, distances), zip(path[1:], distances[1:])):
                    if d1 > d0 + 1e-8:
                        problems.append(
                            f"mdp {index}, gamma={gamma}: distance to {label} case grows from {d0:.3e} "
                            f"at tau={t0} to {d1:.3e} at tau={t1}"
                        )
    bandit = bernoulli_bandit(0.5)
    pi = TabularPolicy.uniform(bandit.n_states, bandit.n_actions)
    for tau in settings.taus:
        value = _fixed_point(bandit, pi, RiskConfig(tau=tau, gamma=0.9))[0]
        if abs(value - tau) > 1e-9:
            problems.append(f"Bernoulli bandit: value {value!r} at tau={tau}, expected {tau}")
    return problems


def check_multistep(settings: VerifySettings) -> List[str]:
    problems = []
    gamma = settings.multistep_gamma
    for index, (mdp, pi) in enumerate(_mdp_suite(settings, settings.multistep_mdps)):
        for tau in settings.multistep_taus:
            for lam in settings.lambdas:
                cfg = RiskConfig(tau=tau, gamma=gamma, lam=lam)
                trace = _trace(mdp, pi, cfg, 8, backup_kind=BackupKind.MULTISTEP)
                for k, ratio, allowed in ratio_violations(trace, gamma_tau_lambda(cfg), _value_scale(mdp, gamma)):
                    problems.append(f"mdp {index}, tau={tau}, lambda={lam}, sweep {k}: ratio {ratio:.6f} > {allowed:.6f}")
                    break
                multi = solve_fixed_point(mdp, pi, cfg, BackupKind.MULTISTEP).values
                single = _fixed_point(mdp, pi, cfg)
                gap = float(np.max(np.abs(multi - single)))
                if gap > 1e-6:
                    problems.append(f"mdp {index}, tau={tau}, lambda={lam}: fixed points differ by {gap:.3e}")
    return problems


def random_trajectory(
    rng: np.random.Generator, length: int, done_probability: float = 0.0, obs_dim: int = 2
) -> Trajectory:
    dones = rng.random(length) < done_probability
    return Trajectory(
        obs=rng.normal(size=(length, obs_dim)),
        actions=rng.integers(0, 2, size=length),
        rewards=rng.uniform(-1.0, 1.0, size=length),
        values=rng.normal(size=length),
        log_probs=np.full(length, math.log(0.5)),
        dones=dones,
        bootstrap_value=float(rng.normal()),
    )


def brute_force_return(traj: Trajectory, t: int, n: int, gamma: float) -> float:
    """Discounted n-step return from t, bootstrapping from the recorded values."""
    total = 0.0
    for k in range(n):
        total += gamma**k * traj.rewards[t + k]
        if traj.dones[t + k]:
            return total
    end = t + n
    following = traj.bootstrap_value if end == len(traj) else traj.values[end]
    return total + gamma**n * following


def check_gae_recovery(settings: VerifySettings) -> List[str]:
    problems = []
    rng = np.random.default_rng(settings.seed + 1)
    gamma, lam = 0.99, 0.9
    cfg = RiskConfig(tau=0.5, alpha=1.0, gamma=gamma, lam=lam, n_max=40)
    for trial in range(3):
        traj = random_trajectory(rng, 120, done_probability=0.05)
        table = build_return_table(traj, cfg)
        for t in range(len(traj)):
            for n in range(1, int(table.valid_length[t]) + 1):
                expected = brute_force_return(traj, t, n, gamma)
                got = table.rows[n - 1, t]
                if abs(got - expected) > 1e-9 * max(1.0, abs(expected)):
                    problems.append(f"trajectory {trial}: row {n}, step {t}: {got!r} != {expected!r}")
                    break

    long_cfg = RiskConfig(tau=0.5, alpha=1.0, gamma=gamma, lam=lam, n_max=1000)
    for trial in range(2):
        traj = random_trajectory(rng, 600, done_probability=0.002)
        ours = compute_advantages(traj, long_cfg).advantages
        oracle = gae_advantages(traj.rewards, traj.values, traj.dones, traj.bootstrap_value, gamma, lam)
        d = np.minimum(traj.steps_to_end(), long_cfg.n_max)
        mask = np.power(lam, d.astype(np.float64)) <= 1e-12
        if not np.any(mask):
            problems.append(f"trajectory {trial}: no step with a negligible truncation tail")
            continue
        gap = float(np.max(np.abs(ours[mask] - oracle[mask])))
        if gap > 1e-6:
            problems.append(f"trajectory {trial}: advantages differ from GAE by {gap:.3e}")
    return problems


def check_gradients(settings: VerifySettings) -> List[str]:
    problems = []
    heads = (PolicyHead(HeadKind.CATEGORICAL, 3), PolicyHead(HeadKind.GAUSSIAN, 2))
    for seed in range(settings.gradient_seeds):
        rng = np.random.default_rng(settings.seed + 100 + seed)
        for head in heads:
            spec = MlpSpec(3, head.dim, (5, 4), Activation.TANH)
            params = init_params(spec, rng, head)
            obs = rng.normal(size=(6, 3))
            logits = policy_logits(params, spec, head, obs)
            if head.kind is HeadKind.CATEGORICAL:
                actions = rng.integers(0, head.dim, size=6)
            else:
                actions = rng.normal(size=(6, head.dim))
            # old log-probs close to the current ones keep every ratio inside the clip range
            old = log_prob(head, logits, actions) + rng.uniform(-0.05, 0.05, size=6)
            batch = Batch(obs, actions, rng.normal(size=6), old, rng.normal(size=6))
            loss = LossSpec(LossKind.CLIPPED_SURROGATE, 0.2, 0.01)
            error = gradient_check(params, spec, head, batch, loss)
            if error > 1e-4:
                problems.append(f"seed {seed}, {head.kind.value} policy: relative error {error:.2e}")
        value_spec = MlpSpec(3, 1, (5, 4), Activation.TANH)
        value_params = init_params(value_spec, rng)
        batch = Batch(rng.normal(size=(6, 3)), targets=rng.normal(size=6))
        error = gradient_check(value_params, value_spec, None, batch, LossSpec(LossKind.VALUE_MSE))
        if error > 1e-4:
            problems.append(f"seed {seed}, value network: relative error {error:.2e}")
    return problems


def check_toy_ordering(settings: VerifySettings) -> List[str]:
    config = ExperimentConfig().with_overrides(
        total_steps=settings.toy_steps, taus=settings.toy_taus, seeds=settings.toy_seeds, workers=settings.workers
    )
    jobs = [(config, toy_agent(config, tau, seed), seed, None) for seed in settings.toy_seeds for tau in settings.toy_taus]
    agents = run_jobs(toy_job, jobs, settings.workers)
    summaries = [evaluate_toy_agent(config, agent, seed)[0] for (_, _, seed, _), agent in zip(jobs, agents)]
    for summary in summaries:
        logger.info("toy agent %s", summary)
    ordering = toy_ordering(summaries)
    problems = []
    needed = math.ceil(2 * len(settings.toy_seeds) / 3)
    if ordering["increasing_seeds"] < needed:
        problems.append(
            f"water-adjacent visitation increases with tau in {ordering['increasing_seeds']} of "
            f"{len(settings.toy_seeds)} seeds, need {needed}"
        )
    if ordering["shorter_path_seeds"] < needed:
        problems.append(
            f"risk-seeking agent takes the shorter path in {ordering['shorter_path_seeds']} of "
            f"{len(settings.toy_seeds)} seeds, need {needed}"
        )
    return problems


CHECKS: Sequence[Callable[[VerifySettings], List[str]]] = (
    check_contraction,
    check_monotonicity,
    check_limits,
    check_multistep,
    check_gae_recovery,
    check_gradients,
    check_toy_ordering,
)


def run_verify(settings: VerifySettings, report: Report) -> Report:
    for number, (name, check) in enumerate(zip(CHECK_NAMES, CHECKS), start=1):
        if check is check_toy_ordering and not settings.toy:
            report.progress(f"check {number} ({name}): skipped, pass --toy to train the gridworld agents")
            report.skipped.append(f"{number}. {name}")
            continue
        start = time.perf_counter()
        problems = check(settings)
        report.done(CheckResult(number, name, not problems, problems, time.perf_counter() - start))
    return report
