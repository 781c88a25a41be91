"""Client-side computation: local SGD rounds, control-variate-corrected
rounds, control refreshes, and the weighted final output average."""

from dataclasses import dataclass

import numpy as np

from . import tasks
from .tasks import UserDataset


@dataclass
class ClientState:
    """Mutable per-user state carried across rounds."""

    theta: np.ndarray
    control: np.ndarray | None = None
    user_index: int = 0


@dataclass
class OutputSchedule:
    """Geometric output weights w_r = (1 - mu eta~ / 2)^(1-r), r = 1..R+1.

    eta~ is the effective round step K * eta_l; weights are positive and
    nondecreasing whenever mu * eta~ < 2.
    """

    mu_strong: float
    eta_tilde: float

    def __post_init__(self):
        if self.mu_strong < 0 or self.eta_tilde <= 0:
            raise ValueError("mu_strong must be >= 0 and eta_tilde > 0")
        if self.mu_strong * self.eta_tilde >= 2:
            raise ValueError("mu_strong * eta_tilde must be < 2 for positive weights")

    def weights(self, num_rounds: int) -> np.ndarray:
        base = 1.0 - 0.5 * self.mu_strong * self.eta_tilde
        r = np.arange(1, num_rounds + 2)
        return base ** (1.0 - r)


def local_sgd_round(
    theta0: np.ndarray,
    num_steps: int,
    step_size: float,
    user: UserDataset,
    batch_size: int,
    rng: np.random.Generator,
    kind: str = tasks.LINEAR_REGRESSION,
) -> np.ndarray:
    """K sequential SGD steps theta <- theta - eta g(theta) from theta0."""
    if num_steps < 1:
        raise ValueError("need at least one local step")
    if step_size < 0:
        raise ValueError("step size must be nonnegative")
    theta = np.array(theta0, dtype=np.float64, copy=True)
    for _ in range(num_steps):
        theta -= step_size * tasks.stochastic_grad(user, theta, batch_size, rng, kind)
    return theta


def local_controlled_round(
    theta0: np.ndarray,
    num_steps: int,
    step_size: float,
    control_local: np.ndarray,
    control_global: np.ndarray,
    user: UserDataset,
    batch_size: int,
    rng: np.random.Generator,
    kind: str = tasks.LINEAR_REGRESSION,
) -> np.ndarray:
    """Drift-corrected local round: theta <- theta - eta (g - c_i + c_hat).

    The correction (c_hat - c_i) is formed once; when the two controls are
    bit-identical it is exactly zero, making the round bit-identical to
    local_sgd_round under the same RNG stream.
    """
    if num_steps < 1:
        raise ValueError("need at least one local step")
    correction = np.asarray(control_global, dtype=np.float64) - np.asarray(
        control_local, dtype=np.float64
    )
    theta = np.array(theta0, dtype=np.float64, copy=True)
    for _ in range(num_steps):
        g = tasks.stochastic_grad(user, theta, batch_size, rng, kind)
        theta -= step_size * (g + correction)
    return theta


def refresh_control(
    user: UserDataset,
    theta_global_prev: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
    kind: str = tasks.LINEAR_REGRESSION,
) -> np.ndarray:
    """Fresh stochastic gradient at the shared model, used as the new local
    control.  Batch sizes beyond the dataset fall back to the full gradient."""
    eff = min(batch_size, user.num_samples)
    return tasks.stochastic_grad(user, theta_global_prev, eff, rng, kind)


def weighted_output(history: list[np.ndarray], schedule: OutputSchedule) -> np.ndarray:
    """Weighted average over the model history [theta^0, ..., theta^R]."""
    if not history:
        raise ValueError("empty history")
    w = schedule.weights(len(history) - 1)
    stacked = np.asarray(history)
    return (w[:, None] * stacked).sum(axis=0) / w.sum()
