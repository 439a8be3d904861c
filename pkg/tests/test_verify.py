import numpy as np
import pytest

from rpbt.config import ConfigError
from rpbt.expectile import FixedPointResult, bernoulli_bandit
from rpbt.mdpfile import format_mdp
from rpbt.report import Report
from rpbt.verify import (
    VerifySettings,
    brute_force_return,
    check_contraction,
    check_gae_recovery,
    check_gradients,
    check_limits,
    check_monotonicity,
    check_multistep,
    check_toy_ordering,
    load_user_mdps,
    random_trajectory,
    ratio_violations,
    run_verify,
)

SMALL = VerifySettings(n_mdps=3, taus=(0.2, 0.5, 0.8), gammas=(0.9,), multistep_mdps=2, gradient_seeds=3)


def trace(residuals):
    return FixedPointResult(np.zeros(1), len(residuals), residuals[-1], residuals=list(residuals))


def test_ratio_violations() -> None:
    assert ratio_violations(trace([1.0, 0.5, 0.25]), 0.5, 1.0) == []
    violations = ratio_violations(trace([1.0, 0.5, 0.4]), 0.5, 1.0)
    assert [k for k, _, _ in violations] == [2]
    assert violations[0][1] == pytest.approx(0.8)


def test_ratio_violations_allow_rounding_near_zero() -> None:
    assert ratio_violations(trace([1e-15, 1e-15]), 0.5, 10.0) == []
    assert ratio_violations(trace([0.0, 1.0]), 0.5, 1.0) == []


def test_brute_force_return() -> None:
    rng = np.random.default_rng(0)
    traj = random_trajectory(rng, 4)
    expected = traj.rewards[1] + 0.5 * traj.rewards[2] + 0.25 * traj.values[3]
    assert brute_force_return(traj, 1, 2, 0.5) == pytest.approx(expected)
    tail = traj.rewards[3] + 0.5 * traj.bootstrap_value
    assert brute_force_return(traj, 3, 1, 0.5) == pytest.approx(tail)


@pytest.mark.parametrize(
    "check", [check_contraction, check_monotonicity, check_limits, check_multistep, check_gae_recovery, check_gradients]
)
def test_checks_pass(check) -> None:
    assert check(SMALL) == []


def test_overshooting_backup_is_caught() -> None:
    faulty = VerifySettings(n_mdps=5, taus=(0.5,), gammas=(0.9,), inject_fault=True)
    assert check_contraction(faulty) != []


def test_run_verify_skips_toy_check() -> None:
    report = run_verify(SMALL, Report(quiet=True))
    assert [check.number for check in report.checks] == [1, 2, 3, 4, 5, 6]
    assert report.skipped == ["7. gridworld risk ordering"]
    assert report.return_code == 0


@pytest.mark.slow
def test_gridworld_risk_ordering() -> None:
    assert check_toy_ordering(VerifySettings(toy=True)) == []


def test_user_mdps_join_the_suites(tmp_path) -> None:
    path = tmp_path / "bandit.mdp"
    path.write_text(format_mdp(bernoulli_bandit(0.3)), encoding="utf-8")
    (bandit,) = load_user_mdps([path])
    assert bandit == bernoulli_bandit(0.3)
    settings = VerifySettings(n_mdps=0, taus=(0.2, 0.8), gammas=(0.9,), mdps=(bandit,))
    assert check_contraction(settings) == []
    assert check_monotonicity(settings) == []
    assert check_contraction(VerifySettings(n_mdps=0, taus=(0.5,), gammas=(0.9,), mdps=(bandit,), inject_fault=True)) != []


def test_invalid_user_mdp_is_a_config_error(tmp_path) -> None:
    path = tmp_path / "leaky.mdp"
    path.write_text("states 2\nactions 1\n0 0 1 0.5 1.0\n1 0 1 1.0 0.0\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="probabilities sum to"):
        load_user_mdps([path])
    path.write_text("states 2\nactions 1\n0 0 1 half 1.0\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="line 3"):
        load_user_mdps([path])
