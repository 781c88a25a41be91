"""Gaussian prior moments of local models and controls, and their
server-side aggregates feeding the MMSE estimators.

Coordinates of each user's vector are modeled i.i.d. Gaussian, so moments are
pooled across coordinates (and calibration trials) into one (mean, variance)
pair per user per round.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class PriorMoments:
    """Per-user, per-round Gaussian moments for the model and control priors."""

    model_mean: float
    model_var: float
    control_mean: float = 0.0
    control_var: float = 0.0

    def __post_init__(self):
        if self.model_var < 0 or self.control_var < 0:
            raise ValueError("variances must be nonnegative")
        vals = (self.model_mean, self.model_var, self.control_mean, self.control_var)
        if not np.all(np.isfinite(vals)):
            raise ValueError("moments must be finite")


@dataclass
class AggregatedPrior:
    """Moments of the averaged vector: mean (1/N) sum mu_i and variance
    (1/N^2) sum sigma_i^2, for models and controls alike."""

    model_mean: float
    model_var: float
    control_mean: float = 0.0
    control_var: float = 0.0


def pooled_moments(samples: np.ndarray) -> tuple[float, float]:
    """Empirical (mean, variance) of one user-round coordinate pool."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 2:
        raise ValueError("need at least 2 samples to estimate a variance")
    return float(samples.mean()), float(samples.var(ddof=1))


def estimate_prior_moments(
    model_pools: np.ndarray, control_pools: np.ndarray | None = None
) -> PriorMoments:
    """Moment-match one user-round: pools hold that user's vector coordinates
    gathered across calibration trials."""
    m_mean, m_var = pooled_moments(model_pools)
    if control_pools is None:
        return PriorMoments(m_mean, m_var)
    c_mean, c_var = pooled_moments(control_pools)
    return PriorMoments(m_mean, m_var, c_mean, c_var)


def aggregate_prior(moments: list[PriorMoments], n: int | None = None) -> AggregatedPrior:
    """Aggregate per-user moments over the participating set.

    n defaults to the list length; under partial participation pass the
    participants' moments and their count.
    """
    if not moments:
        raise ValueError("cannot aggregate an empty moment list")
    if n is None:
        n = len(moments)
    if n != len(moments):
        raise ValueError("n must equal the number of moment entries")
    inv_n = 1.0 / n
    inv_n2 = inv_n * inv_n
    return AggregatedPrior(
        model_mean=inv_n * sum(m.model_mean for m in moments),
        model_var=inv_n2 * sum(m.model_var for m in moments),
        control_mean=inv_n * sum(m.control_mean for m in moments),
        control_var=inv_n2 * sum(m.control_var for m in moments),
    )
