import math

import numpy as np
import pytest

from rpbt.expectile import (
    BackupKind,
    NonConvergenceError,
    advantage_exact,
    bernoulli_bandit,
    best_case_backup,
    default_n_terms,
    expectile_backup,
    gamma_tau,
    gamma_tau_lambda,
    multistep_backup,
    policy_evaluation,
    random_mdp,
    random_policy,
    solve_expectile_exact,
    solve_fixed_point,
    worst_case_backup,
)
from rpbt.model import DomainError, RiskConfig, TabularMDP, TabularPolicy, validate_mdp


def single_state(reward: float = 1.0) -> TabularMDP:
    return TabularMDP(1, 1, {(0, 0): ((0, 1.0, reward),)})


def test_single_state_backup() -> None:
    mdp = single_state()
    pi = TabularPolicy.uniform(1, 1)
    new = expectile_backup(np.zeros(1), mdp, pi, RiskConfig(tau=0.5, gamma=0.9))
    np.testing.assert_allclose(new, [1.0])


def test_gamma_tau_examples() -> None:
    assert gamma_tau(RiskConfig(tau=0.5, gamma=0.9)) == pytest.approx(0.9)
    # alpha = 1 / 1.6, min(tau, 1 - tau) = 0.2
    assert gamma_tau(RiskConfig(tau=0.8, gamma=0.9)) == pytest.approx(1 - 2 * 0.625 * 0.1 * 0.2)


def test_gamma_tau_lambda() -> None:
    cfg = RiskConfig(tau=0.5, gamma=0.9, lam=0.5)
    assert gamma_tau_lambda(cfg) == pytest.approx(0.5 * 0.9 / (1 - 0.45))
    assert gamma_tau_lambda(cfg) < gamma_tau(cfg)


def test_backup_rejects_wrong_shapes() -> None:
    mdp = single_state()
    with pytest.raises(DomainError):
        expectile_backup(np.zeros(2), mdp, TabularPolicy.uniform(1, 1), RiskConfig())
    with pytest.raises(DomainError):
        expectile_backup(np.array([math.nan]), mdp, TabularPolicy.uniform(1, 1), RiskConfig())


def test_deterministic_mdp_ignores_tau() -> None:
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng, max_successors=1)
    pi = random_policy(rng, mdp, deterministic=True)
    expected = policy_evaluation(mdp, pi, 0.9)
    for tau in (0.1, 0.5, 0.9):
        result = solve_fixed_point(mdp, pi, RiskConfig(tau=tau, gamma=0.9))
        np.testing.assert_allclose(result.values, expected, atol=1e-6)


def test_half_tau_matches_policy_evaluation() -> None:
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp)
    result = solve_fixed_point(mdp, pi, RiskConfig(tau=0.5, gamma=0.9))
    np.testing.assert_allclose(result.values, policy_evaluation(mdp, pi, 0.9), atol=1e-8)


@pytest.mark.parametrize("tau", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_bernoulli_bandit_value_is_tau(tau: float) -> None:
    mdp = bernoulli_bandit(0.5)
    assert validate_mdp(mdp) == []
    pi = TabularPolicy.uniform(3, 1)
    values = solve_expectile_exact(mdp, pi, RiskConfig(tau=tau, gamma=0.9)).values
    assert values[0] == pytest.approx(tau, abs=1e-9)
    assert solve_fixed_point(mdp, pi, RiskConfig(tau=tau, gamma=0.9)).values[0] == pytest.approx(tau, abs=1e-7)


def test_residual_ratios_respect_modulus() -> None:
    rng = np.random.default_rng(7)
    for _ in range(5):
        mdp = random_mdp(rng)
        pi = random_policy(rng, mdp)
        cfg = RiskConfig(tau=0.2, gamma=0.9)
        result = solve_fixed_point(mdp, pi, cfg, tol=1e-8)
        modulus = gamma_tau(cfg)
        for previous, current in zip(result.residuals, result.residuals[1:]):
            if previous > 1e-10:
                assert current <= modulus * previous + 1e-12


def test_exact_solver_matches_iteration() -> None:
    rng = np.random.default_rng(11)
    for _ in range(5):
        mdp = random_mdp(rng)
        pi = random_policy(rng, mdp)
        cfg = RiskConfig(tau=0.3, gamma=0.9)
        exact = solve_expectile_exact(mdp, pi, cfg).values
        iterated = solve_fixed_point(mdp, pi, cfg).values
        np.testing.assert_allclose(exact, iterated, atol=1e-7)


def test_fixed_point_increases_with_tau() -> None:
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp)
    values = [solve_expectile_exact(mdp, pi, RiskConfig(tau=t, gamma=0.9)).values for t in (0.1, 0.5, 0.9)]
    assert np.all(values[0] <= values[1] + 1e-8)
    assert np.all(values[1] <= values[2] + 1e-8)


def test_worst_and_best_case_envelope() -> None:
    rng = np.random.default_rng(9)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp)
    cfg = RiskConfig(tau=0.5, gamma=0.9)
    worst = solve_fixed_point(mdp, pi, cfg, BackupKind.WORST).values
    best = solve_fixed_point(mdp, pi, cfg, BackupKind.BEST).values
    middle = solve_expectile_exact(mdp, pi, cfg).values
    assert np.all(worst <= middle + 1e-8)
    assert np.all(middle <= best + 1e-8)


def test_extreme_backups_use_supported_outcomes_only() -> None:
    mdp = TabularMDP(
        2,
        2,
        {
            (0, 0): ((0, 1.0, 5.0),),
            (0, 1): ((1, 1.0, -5.0),),
            (1, 0): ((1, 1.0, 0.0),),
            (1, 1): ((1, 1.0, 0.0),),
        },
        terminal=(False, True),
    )
    pi = TabularPolicy.deterministic([0, 0], 2)
    v = np.zeros(2)
    np.testing.assert_allclose(worst_case_backup(v, mdp, pi, 0.9), [5.0, 0.0])
    np.testing.assert_allclose(best_case_backup(v, mdp, pi, 0.9), [5.0, 0.0])


def test_multistep_shares_the_fixed_point() -> None:
    rng = np.random.default_rng(2)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp)
    cfg = RiskConfig(tau=0.7, gamma=0.8, lam=0.7)
    single = solve_expectile_exact(mdp, pi, cfg).values
    np.testing.assert_allclose(multistep_backup(single, mdp, pi, cfg), single, atol=1e-9)
    multi = solve_fixed_point(mdp, pi, cfg, BackupKind.MULTISTEP).values
    np.testing.assert_allclose(multi, single, atol=1e-6)


def test_multistep_with_zero_lambda_is_one_backup() -> None:
    rng = np.random.default_rng(4)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp)
    cfg = RiskConfig(tau=0.3, gamma=0.9, lam=0.0)
    v = rng.normal(size=mdp.n_states)
    np.testing.assert_allclose(multistep_backup(v, mdp, pi, cfg), expectile_backup(v, mdp, pi, cfg))


def test_default_n_terms() -> None:
    assert default_n_terms(0.0) == 1
    n = default_n_terms(0.5)
    assert 0.5 ** (n - 1) <= 1e-12 < 0.5 ** (n - 2)


def test_non_convergence_carries_the_trace() -> None:
    rng = np.random.default_rng(1)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp)
    with pytest.raises(NonConvergenceError) as excinfo:
        solve_fixed_point(mdp, pi, RiskConfig(tau=0.5, gamma=0.99), tol=1e-14, max_iter=3)
    error = excinfo.value
    assert error.iterations == 3
    assert error.result is not None
    assert len(error.result.residuals) == 3


def test_advantage_vanishes_at_the_fixed_point_on_average() -> None:
    rng = np.random.default_rng(8)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp)
    cfg = RiskConfig(tau=0.3, gamma=0.9)
    values = solve_expectile_exact(mdp, pi, cfg).values
    table = advantage_exact(values, mdp, pi, cfg)
    np.testing.assert_allclose((pi.probs * table).sum(axis=1), 0.0, atol=1e-8)


def test_random_mdps_are_valid() -> None:
    rng = np.random.default_rng(12)
    for _ in range(20):
        mdp = random_mdp(rng)
        assert validate_mdp(mdp) == []
        assert mdp.n_states <= 10 and mdp.n_actions <= 3
        assert np.all(np.abs(mdp.outcomes.reward) <= 1.0)


def test_bandit_backups_from_zero() -> None:
    mdp = bernoulli_bandit(0.5)
    pi = TabularPolicy.uniform(3, 1)
    v = np.zeros(3)
    new = expectile_backup(v, mdp, pi, RiskConfig(tau=0.9, gamma=0.9))
    assert new[0] == pytest.approx(0.5)
    assert worst_case_backup(v, mdp, pi, 0.9)[0] == 0.0
    assert best_case_backup(v, mdp, pi, 0.9)[0] == 1.0


def test_bandit_worst_and_best_fixed_points() -> None:
    mdp = bernoulli_bandit(0.5)
    pi = TabularPolicy.uniform(3, 1)
    cfg = RiskConfig(gamma=0.9)
    assert solve_fixed_point(mdp, pi, cfg, BackupKind.WORST).values[0] == 0.0
    assert solve_fixed_point(mdp, pi, cfg, BackupKind.BEST).values[0] == 1.0


def test_gamma_tau_near_one_for_extreme_tau() -> None:
    assert gamma_tau(RiskConfig(tau=0.9, gamma=0.99)) == pytest.approx(0.998888888888889)
    assert gamma_tau(RiskConfig(tau=1e-6, gamma=0.9)) > 0.99999


def test_gamma_tau_lambda_examples() -> None:
    cfg = RiskConfig(tau=0.5, gamma=0.9, lam=0.0)
    assert gamma_tau_lambda(cfg) == pytest.approx(gamma_tau(cfg))
    assert gamma_tau_lambda(RiskConfig(tau=0.5, gamma=0.9, lam=0.999999)) < 1e-4


def test_two_term_series_folds_the_tail() -> None:
    rng = np.random.default_rng(6)
    mdp = random_mdp(rng)
    pi = random_policy(rng, mdp)
    cfg = RiskConfig(tau=0.6, gamma=0.9, lam=0.5)
    v = rng.normal(size=mdp.n_states)
    once = expectile_backup(v, mdp, pi, cfg)
    twice = expectile_backup(once, mdp, pi, cfg)
    np.testing.assert_allclose(multistep_backup(v, mdp, pi, cfg, n_terms=2), 0.5 * once + 0.5 * twice)


def test_fixed_point_is_unchanged_by_a_backup() -> None:
    rng = np.random.default_rng(13)
    mdp = random_mdp(rng, max_successors=1)
    pi = random_policy(rng, mdp, deterministic=True)
    v = policy_evaluation(mdp, pi, 0.9)
    for tau in (0.2, 0.8):
        np.testing.assert_allclose(expectile_backup(v, mdp, pi, RiskConfig(tau=tau, gamma=0.9)), v, atol=1e-10)
