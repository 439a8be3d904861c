"""
Sample-form multi-step expectile returns and advantages.

The expectile operator is nonlinear, so n-step values do not telescope the way GAE does.
Instead a triangular table is kept: row n, column t holds the n-fold sample operator applied
at s_t, built from row n - 1 one step later. Columns are truncated at episode ends and at
`n_max` rows, and the lambda mixture over the valid rows of a column is renormalised to sum
to one.

At tau = 1/2, alpha = 1 every entry is the ordinary n-step return and the mixture is GAE plus
the value baseline. For tau != 1/2 the sample operator is biased with respect to the exact
multi-step operator; nothing here corrects for that.
"""
from dataclasses import dataclass
from typing import Union

import numpy as np

from rpbt.model import DomainError, RiskConfig, Trajectory

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class ReturnTable:
    rows: np.ndarray  # (n_rows, T), zero where n > valid_length[t]
    valid_length: np.ndarray  # d_t = min(n_max, steps to segment end)

    @property
    def n_rows(self) -> int:
        return int(self.rows.shape[0])

    def populated(self) -> np.ndarray:
        """Boolean mask of the triangle: entry (n - 1, t) is used iff n <= d_t."""
        n = np.arange(1, self.n_rows + 1)[:, None]
        return n <= self.valid_length[None, :]


@dataclass(frozen=True)
class AdvantageBatch:
    advantages: np.ndarray
    targets: np.ndarray


def one_step_sample(
    v_s: ArrayLike, v_target_next: ArrayLike, r: ArrayLike, cfg: RiskConfig, done: ArrayLike = False
) -> ArrayLike:
    """v_s + 2 alpha (tau [d]_+ + (1 - tau) [d]_-), d = r + gamma v_target_next (1 - done) - v_s."""
    bootstrap = np.where(done, 0.0, cfg.gamma * np.asarray(v_target_next, dtype=np.float64))
    delta = np.asarray(r, dtype=np.float64) + bootstrap - v_s
    result = v_s + 2.0 * cfg.step_size * (cfg.tau * np.maximum(delta, 0.0) + (1.0 - cfg.tau) * np.minimum(delta, 0.0))
    if np.ndim(result) == 0:
        return float(result)
    return result


def build_return_table(traj: Trajectory, cfg: RiskConfig) -> ReturnTable:
    length = len(traj)
    if length == 0:
        raise DomainError("cannot build a return table from an empty trajectory")
    valid = np.minimum(traj.steps_to_end(), cfg.n_max)
    n_rows = int(valid.max())
    values = traj.values
    dones = traj.dones

    rows = np.zeros((n_rows, length))
    # V_hat_{n-1}(s_{t+1}); the segment cut bootstraps from the recorded final value
    target = np.append(values[1:], traj.bootstrap_value)
    for n in range(1, n_rows + 1):
        row = one_step_sample(values, target, traj.rewards, cfg, dones)
        row = np.where(n <= valid, row, 0.0)
        rows[n - 1] = row
        target = np.append(row[1:], traj.bootstrap_value)
    return ReturnTable(rows=rows, valid_length=valid)


def normalized_weights(d: int, lam: float) -> np.ndarray:
    """(1 - lambda) / (1 - lambda^d) * lambda^(h - 1) for h = 1..d; lambda = 0 puts all weight on h = 1."""
    if d < 1:
        raise DomainError(f"column length must be at least 1, got {d}")
    powers = np.power(lam, np.arange(d, dtype=np.float64))
    return powers * ((1.0 - lam) / (1.0 - lam**d))


def lambda_returns(table: ReturnTable, cfg: RiskConfig) -> np.ndarray:
    lam = cfg.lam
    d = table.valid_length
    powers = np.power(lam, np.arange(table.n_rows, dtype=np.float64))[:, None]
    weighted = np.where(table.populated(), powers * table.rows, 0.0).sum(axis=0)
    # d >= 1, so the normaliser is finite and equals 1 at lambda = 0
    return weighted * (1.0 - lam) / (1.0 - np.power(lam, d))


def compute_advantages(traj: Trajectory, cfg: RiskConfig) -> AdvantageBatch:
    returns = lambda_returns(build_return_table(traj, cfg), cfg)
    advantages = returns - traj.values
    return AdvantageBatch(advantages=advantages, targets=traj.values + advantages)


def gae_advantages(
    rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, bootstrap_value: float, gamma: float, lam: float
) -> np.ndarray:
    """Reference generalized advantage estimate, sum_l (gamma lambda)^l delta_{t+l}, reset at episode ends."""
    length = len(rewards)
    advantages = np.zeros(length)
    last = 0.0
    for t in reversed(range(length)):
        nonterminal = 0.0 if dones[t] else 1.0
        next_value = bootstrap_value if t == length - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        advantages[t] = last
    return advantages
