"""Convergence-rate bound evaluators and estimation of their constants.

Each evaluator computes its printed finite-sample bound exactly, with the
log arguments clamped as log(max{1, .}).  Constants (curvature, gradient
moments, dissimilarity, channel error factors) are estimated from the task
and the calibration artifact so experiments can overlay theory curves.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tasks
from .aggregation import residual_noise_factor
from .precoding import CalibrationArtifact, alpha_r, beta_r
from .streams import PROBE, substream
from .tasks import FederatedDataset


@dataclass
class BoundConstants:
    """Everything the three bounds consume."""

    mu_strong: float
    beta_smooth: float
    sigma_sq: float  # stochastic-gradient variance bound
    m_sq: float  # stochastic-gradient second-moment bound
    dim: int
    num_users: int
    k_local: int
    power: float
    g_sq: float = 0.0  # gradient dissimilarity offset
    b_sq: float = 1.0  # gradient dissimilarity slope
    sigma_theta: float = 0.0  # model-aggregation residual error factor
    sigma_c: float = 0.0  # control-aggregation residual error factor
    sigma_c_fading: float | None = None  # fading-path control error factor
    participants: int | None = None
    h_min: float = 1.0
    d0: float = 0.0  # initial squared distance to the optimum
    d2_tilde: float | None = None  # fading-path initial term override

    def __post_init__(self):
        if self.mu_strong <= 0 or self.beta_smooth <= 0:
            raise ValueError("curvature moduli must be positive")
        if self.b_sq < 1:
            raise ValueError("dissimilarity slope must be >= 1")
        for name in ("sigma_sq", "m_sq", "g_sq", "sigma_theta", "sigma_c", "d0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 < self.h_min <= 1:
            raise ValueError("h_min must lie in (0, 1]")

    @property
    def s_count(self) -> int:
        return self.participants if self.participants is not None else self.num_users


class BoundDomainError(ValueError):
    """Raised when R violates a theorem's round-count precondition."""


def _clamped_log(x: float) -> float:
    return math.log(max(1.0, x))


def _ratio(num: float, den: float) -> float:
    if den == 0.0:
        return 0.0  # the multiplying coefficient is zero too
    return num / den


def theorem1_min_rounds(c: BoundConstants) -> float:
    return 8.0 * c.beta_smooth * (1.0 + c.b_sq) / c.mu_strong


def theorem1_max_step(c: BoundConstants) -> float:
    return 1.0 / (8.0 * c.beta_smooth * c.k_local * (1.0 + c.b_sq))


def theorem1_terms(c: BoundConstants, rounds: int, strict: bool = True) -> dict:
    if strict and rounds < theorem1_min_rounds(c):
        raise BoundDomainError(
            f"need R >= {theorem1_min_rounds(c):.1f} for the drift-free rate, got {rounds}"
        )
    mu, beta, n, k = c.mu_strong, c.beta_smooth, c.num_users, c.k_local
    sgd = 3.0 * c.sigma_sq * (1 + n) / (mu * rounds * k * n)
    channel = 3.0 * c.dim * c.m_sq * c.sigma_theta / (mu * rounds * n * n * c.power)
    c1 = c.sigma_sq * (1 + n) / (k * n) + c.dim * c.m_sq * c.sigma_theta / (n * n * c.power)
    log1 = _clamped_log(_ratio(mu * mu * rounds * c.d0, c1))
    c2 = beta * c.g_sq
    log2 = _clamped_log(_ratio(mu * mu * rounds * c.d0, c2))
    dissim = 3.0 * beta * c.g_sq / (mu * mu * rounds * rounds) * log2 * log2
    init = 3.0 * mu * c.d0 * math.exp(-mu * rounds / (16.0 * beta * (1.0 + c.b_sq)))
    total = (sgd + channel) * log1 + dissim + init
    return {
        "sgd": sgd,
        "channel": channel,
        "log": log1,
        "dissimilarity": dissim,
        "init": init,
        "total": total,
    }


def theorem1_bound(c: BoundConstants, rounds: int, strict: bool = True) -> float:
    return theorem1_terms(c, rounds, strict)["total"]


def theorem2_min_rounds(c: BoundConstants) -> float:
    return 8.0 * c.beta_smooth / c.mu_strong


def theorem2_max_step(c: BoundConstants) -> float:
    return 1.0 / (8.0 * c.beta_smooth * c.k_local)


def theorem2_terms(c: BoundConstants, rounds: int, strict: bool = True) -> dict:
    if strict and rounds < theorem2_min_rounds(c):
        raise BoundDomainError(
            f"need R >= {theorem2_min_rounds(c):.1f} for the controlled rate, got {rounds}"
        )
    mu, n, k = c.mu_strong, c.num_users, c.k_local
    sgd = 2.0 * c.sigma_sq * (1 + n) / (mu * rounds * k * n)
    ch_model = 2.0 * c.dim * c.m_sq * c.sigma_theta / (mu * rounds * k * n * n * c.power)
    ch_ctrl = (
        2.0 * c.dim * c.m_sq * c.sigma_c * (1 + n * k) / (mu * rounds * k * n * n * c.power)
    )
    c3 = (
        c.sigma_sq * (1 + n) / (k * n)
        + c.dim * c.m_sq * c.sigma_theta / (k * n * n * c.power)
        + c.dim * c.m_sq * c.sigma_c * (1 + n * k) / (k * n * n * c.power)
    )
    log1 = _clamped_log(_ratio(mu * mu * rounds * c.d0, c3))
    init = 2.0 * mu * c.d0 * math.exp(-mu * rounds / (16.0 * c.beta_smooth))
    total = (sgd + ch_model + ch_ctrl) * log1 + init
    return {
        "sgd": sgd,
        "channel": ch_model,
        "channel_ctrl": ch_ctrl,
        "log": log1,
        "init": init,
        "total": total,
    }


def theorem2_bound(c: BoundConstants, rounds: int, strict: bool = True) -> float:
    return theorem2_terms(c, rounds, strict)["total"]


def theorem3_min_rounds(c: BoundConstants) -> float:
    return max(162.0 * c.beta_smooth / c.mu_strong, 30.0 * c.num_users / c.s_count)


def theorem3_max_step(c: BoundConstants) -> float:
    return min(
        1.0 / (81.0 * c.beta_smooth * c.k_local),
        c.s_count / (15.0 * c.mu_strong * c.num_users * c.k_local),
    )


def warm_start_control_term(c: BoundConstants) -> float:
    """Upper bound on the warm-start control distance term:
    N d0 / S + N sigma^2 / (K S beta^2)."""
    s = c.s_count
    return c.num_users * c.d0 / s + c.num_users * c.sigma_sq / (
        c.k_local * s * c.beta_smooth**2
    )


def theorem3_terms(c: BoundConstants, rounds: int, strict: bool = True) -> dict:
    if strict and rounds < theorem3_min_rounds(c):
        raise BoundDomainError(
            f"need R >= {theorem3_min_rounds(c):.1f} for the fading rate, got {rounds}"
        )
    mu, k, s = c.mu_strong, c.k_local, c.s_count
    h2 = c.h_min * c.h_min
    sigma_c_f = c.sigma_c_fading if c.sigma_c_fading is not None else c.sigma_c
    d2 = c.d2_tilde if c.d2_tilde is not None else c.d0 + warm_start_control_term(c)
    sgd = c.sigma_sq * (1 + s) / (mu * rounds * k * s)
    ch_model = c.dim * c.m_sq * c.sigma_theta / (mu * rounds * k * s * s * h2 * c.power)
    ch_ctrl = c.dim * c.m_sq * sigma_c_f * (1 + s * k) / (mu * rounds * k * s * s * h2 * c.power)
    c4 = (
        c.sigma_sq * (1 + s) / (k * s)
        + c.dim * c.m_sq * c.sigma_theta / (k * s * s * h2 * c.power)
        + c.dim * c.m_sq * sigma_c_f * (1 + s * k) / (k * s * s * h2 * c.power)
    )
    log1 = _clamped_log(_ratio(mu * mu * rounds * d2, c4))
    rate = min(s / (30.0 * c.num_users), mu / (162.0 * c.beta_smooth))
    init = mu * d2 * math.exp(-rate * rounds)
    total = (sgd + ch_model + ch_ctrl) * log1 + init
    return {
        "sgd": sgd,
        "channel": ch_model,
        "channel_ctrl": ch_ctrl,
        "log": log1,
        "init": init,
        "d2_tilde": d2,
        "total": total,
    }


def theorem3_bound(c: BoundConstants, rounds: int, strict: bool = True) -> float:
    return theorem3_terms(c, rounds, strict)["total"]


def channel_error_factors(
    artifact: CalibrationArtifact,
    num_users: int,
    power: float,
    noise_var: float,
    participants: int | None = None,
    h_min: float = 1.0,
    rho_min: float = 1.0,
) -> tuple[float, float, float]:
    """(sigma_theta, sigma_c, sigma_c_fading): max over calibrated rounds of
    the aggregation residual factors implied by the stored priors."""
    rounds = artifact.table.rounds_covered
    n = num_users
    s = participants if participants is not None else n
    sig_t, sig_c, sig_cf = 0.0, 0.0, 0.0
    for r in range(1, rounds + 1):
        a = alpha_r(power, artifact.table, r)
        b = beta_r(power, artifact.table, r)
        model_var = artifact.sigma2[r - 1].sum() / (n * n)
        ctrl_var = artifact.v2[r - 1].sum() / (n * n)
        sig_t = max(sig_t, residual_noise_factor(model_var, n, a, noise_var))
        sig_c = max(sig_c, residual_noise_factor(ctrl_var, n, b, noise_var))
        # fading path: subset average prior with the rho_min-scaled recovery
        ctrl_var_s = artifact.v2[r - 1].mean() / s
        sig_cf = max(
            sig_cf, residual_noise_factor(ctrl_var_s, s * rho_min, b, noise_var)
        )
    return sig_t, sig_c, sig_cf


def estimate_constants(
    fed: FederatedDataset,
    probe_budget: int,
    k_local: int,
    power: float = 1.0,
    batch_size: int = 1,
    artifact: CalibrationArtifact | None = None,
    noise_var: float = 0.0,
    participants: int | None = None,
    h_min: float = 1.0,
    rho_min: float = 1.0,
    seed: int = 0,
) -> BoundConstants:
    """Empirical bound constants from gradient probes.

    Curvature comes from the pooled Hessian; sigma^2 and M^2 from stochastic
    gradients at probe points spanning the init-to-optimum region; G^2, B^2
    from a least-squares fit of the dissimilarity inequality; the channel
    error factors from the calibration artifact when given.
    """
    if probe_budget < 100:
        raise ValueError("probe budget must allow at least 100 gradient evaluations")
    # per-user extremes: the assumptions constrain every local loss
    mu, beta = tasks.per_user_curvature_extremes(fed)
    if mu <= 0:
        raise ValueError("task is not strongly convex user-by-user; add regularization")
    d = fed.model_dim
    n = fed.num_users
    kind = fed.task_kind
    oracle = tasks.global_optimum(fed)
    rng = substream(seed, PROBE)

    draws_per = 8
    n_probes = max(8, probe_budget // (n * (draws_per + 1)))
    sigma_sq = 0.0
    m_sq = 0.0
    ys, xs = [], []
    for p in range(n_probes):
        # alternate between the init-distribution region and the optimum
        if p % 2 == 0:
            theta = rng.standard_normal(d)
        else:
            theta = oracle.theta_star + rng.standard_normal(d) * 0.5
        full = [tasks.full_grad(fed.users[i], theta, kind) for i in range(n)]
        xs.append(float(np.linalg.norm(np.mean(full, axis=0)) ** 2))
        ys.append(float(np.mean([g @ g for g in full])))
        for i in range(n):
            draws = [
                tasks.stochastic_grad(fed.users[i], theta, batch_size, rng, kind)
                for _ in range(draws_per)
            ]
            dev = [float((g - full[i]) @ (g - full[i])) for g in draws]
            sec = [float(g @ g) for g in draws]
            sigma_sq = max(sigma_sq, float(np.mean(dev)))
            m_sq = max(m_sq, float(np.mean(sec)))

    slope, intercept = np.polyfit(xs, ys, 1)
    b_sq = max(float(slope), 1.0)
    g_sq = max(float(intercept), 0.0)

    sigma_theta = sigma_c = sigma_cf = 0.0
    if artifact is not None:
        sigma_theta, sigma_c, sigma_cf = channel_error_factors(
            artifact, n, power, noise_var, participants, h_min, rho_min
        )

    d0 = d + float(oracle.theta_star @ oracle.theta_star)
    return BoundConstants(
        mu_strong=mu,
        beta_smooth=beta,
        sigma_sq=sigma_sq,
        m_sq=m_sq,
        dim=d,
        num_users=n,
        k_local=k_local,
        power=power,
        g_sq=g_sq,
        b_sq=b_sq,
        sigma_theta=sigma_theta,
        sigma_c=sigma_c,
        sigma_c_fading=sigma_cf if artifact is not None else None,
        participants=participants,
        h_min=h_min,
        d0=d0,
    )
