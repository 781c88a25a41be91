"""Server-side recovery of noisy averages and Bayesian MMSE shrinkage.

Recovery inverts the precoding so the channel output becomes
(1/N) sum_i v_i + w with a known effective noise variance; shrinkage then
interpolates each coordinate toward the aggregated prior mean with factor
kappa = prior_var / (prior_var + noise_var), which is the conditional
expectation under the Gaussian prior.
"""

from dataclasses import dataclass

import numpy as np

from .priors import AggregatedPrior

MODEL = "model"
CONTROL = "control"


@dataclass
class RecoveredAverage:
    """A recovered average vector plus the variance of its additive noise."""

    value: np.ndarray
    kind: str
    effective_noise_var: float

    def __post_init__(self):
        if self.kind not in (MODEL, CONTROL):
            raise ValueError(f"kind must be '{MODEL}' or '{CONTROL}'")
        if self.effective_noise_var < 0:
            raise ValueError("effective noise variance must be nonnegative")


def recover_model(
    y_tilde: np.ndarray,
    n: int,
    alpha_r: float,
    theta_prev: np.ndarray,
    noise_var: float,
) -> RecoveredAverage:
    """Undo the update precoding: y / (N sqrt(alpha)) + theta_prev.

    Fed the superposed precoded updates this equals the average local model
    plus noise of per-coordinate variance noise_var / (N^2 alpha).
    """
    if alpha_r <= 0:
        raise ValueError("alpha_r must be positive")
    value = np.asarray(y_tilde) / (n * np.sqrt(alpha_r)) + theta_prev
    return RecoveredAverage(value, MODEL, noise_var / (n * n * alpha_r))


def recover_control(
    z_tilde: np.ndarray, n: int, beta_r: float, noise_var: float
) -> RecoveredAverage:
    """As recover_model for the control transmission, without the shift."""
    if beta_r <= 0:
        raise ValueError("beta_r must be positive")
    value = np.asarray(z_tilde) / (n * np.sqrt(beta_r))
    return RecoveredAverage(value, CONTROL, noise_var / (n * n * beta_r))


def recover_fading(
    y_tilde: np.ndarray,
    z_tilde: np.ndarray,
    participants: int,
    h_min: float,
    rho_min: float,
    alpha_r: float,
    beta_r: float,
    theta_prev: np.ndarray,
    noise_var: float,
) -> tuple[RecoveredAverage, RecoveredAverage]:
    """Recovery under truncated channel inversion with |S| participants.

    The h_min (rho_min) scaling at the precoders amplifies the residual noise
    to variance noise_var / (alpha (|S| h_min)^2) per coordinate.
    """
    if participants < 1:
        raise ValueError("participant set is empty")
    if alpha_r <= 0 or beta_r <= 0:
        raise ValueError("precoding factors must be positive")
    s = participants
    model = np.asarray(y_tilde) / (s * np.sqrt(alpha_r) * h_min) + theta_prev
    ctrl = np.asarray(z_tilde) / (s * np.sqrt(beta_r) * rho_min)
    mvar = noise_var / (alpha_r * (s * h_min) ** 2)
    cvar = noise_var / (beta_r * (s * rho_min) ** 2)
    return (
        RecoveredAverage(model, MODEL, mvar),
        RecoveredAverage(ctrl, CONTROL, cvar),
    )


def _prior_pair(noisy: RecoveredAverage, prior: AggregatedPrior) -> tuple[float, float]:
    if noisy.kind == MODEL:
        return prior.model_mean, prior.model_var
    return prior.control_mean, prior.control_var


def mmse_shrink(noisy: RecoveredAverage, prior: AggregatedPrior) -> np.ndarray:
    """Coordinatewise conditional expectation under the Gaussian prior.

    Zero effective noise short-circuits to the identity (kappa = 1, exact by
    construction, covering the 0/0 corner); zero prior variance collapses to
    the prior mean.
    """
    mean, var = _prior_pair(noisy, prior)
    if var < 0:
        raise ValueError("prior variance must be nonnegative")
    if noisy.effective_noise_var == 0.0:
        return np.array(noisy.value, copy=True)
    if var == 0.0:
        return np.full_like(noisy.value, mean)
    kappa = var / (var + noisy.effective_noise_var)
    return mean + kappa * (noisy.value - mean)


def residual_noise_factor(prior_var: float, n: int, alpha_r: float, noise_var: float) -> float:
    """The residual error factor sigma_theta^r = noise_var / (1 + noise_var /
    (alpha N^2 prior_var)); the per-coordinate MSE is this over N^2 alpha."""
    if alpha_r <= 0:
        raise ValueError("alpha_r must be positive")
    if prior_var < 0:
        raise ValueError("prior variance must be nonnegative")
    if prior_var == 0.0 or noise_var == 0.0:
        return 0.0
    return noise_var / (1.0 + noise_var / (alpha_r * n * n * prior_var))


def analytic_mse(prior: AggregatedPrior, n: int, alpha_r: float, noise_var: float) -> float:
    """Minimum per-coordinate MSE of the shrunk model average:
    sigma_theta^r / (N^2 alpha)."""
    factor = residual_noise_factor(prior.model_var, n, alpha_r, noise_var)
    return factor / (n * n * alpha_r)
