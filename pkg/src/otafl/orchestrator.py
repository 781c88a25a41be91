"""Algorithm drivers: each variant wires local updates, precoding, the
channel, and aggregation into a round loop emitting per-round metrics.

The channel is simulated in its equivalent-output form: the recovered
average equals the participant mean plus additive noise whose standard
deviation follows from the precoder and recovery scalings.  This is
algebraically identical to precode / superpose / divide (the physical path
is implemented and cross-checked in the channel and aggregation modules)
and it makes every zero-noise run collapse bit-for-bit onto its noiseless
counterpart, since the mean is then computed by literally the same
floating-point operations.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import local_update, precoding, streams, tasks
from .aggregation import CONTROL, MODEL, RecoveredAverage, mmse_shrink
from .channel import RAYLEIGH, UNIFORM, UNIT
from .config import (
    CHANNEL_KINDS,
    CONTROLLED_KINDS,
    MMSE_KINDS,
    PRECODED_KINDS,
    AlgorithmKind,
    ExperimentConfig,
)
from .local_update import OutputSchedule
from .precoding import CalibrationArtifact, alpha_r, beta_r
from .priors import aggregate_prior
from .tasks import FederatedDataset, GlobalOptimum, UserDataset


@dataclass
class RoundMetrics:
    """One round's scoreboard entry."""

    round: int
    loss_gap: float
    accuracy: float | None
    mean_tx_power: float
    participants: int
    wallclock: float


@dataclass
class TrialResult:
    """Everything one trial of one algorithm produces."""

    kind: AlgorithmKind
    trial: int
    metrics: list[RoundMetrics]
    final_gap: float
    final_window_gap: float
    weighted_output_gap: float
    final_accuracy: float | None
    init_distance_sq: float
    history: list[np.ndarray] | None = None


@dataclass
class RunEnv:
    """Prepared inputs shared by every trial of an experiment."""

    cfg: ExperimentConfig
    fed: FederatedDataset
    oracle: GlobalOptimum
    schedule: OutputSchedule
    batch_size: int
    refresh_batch: int
    calib_fedavg: CalibrationArtifact | None = None
    calib_scaffold: CalibrationArtifact | None = None
    test_set: UserDataset | None = None

    @property
    def noise_var(self) -> float:
        return self.cfg.resolved_noise_var


def select_participants(rng: np.random.Generator, n: int, s: int) -> np.ndarray:
    """Uniform size-s subset of {0..n-1} via partial Fisher-Yates, sorted so
    downstream reductions run in fixed user order."""
    if not 1 <= s <= n:
        raise ValueError(f"participant count must lie in [1, {n}]")
    idx = np.arange(n)
    for j in range(s):
        k = int(rng.integers(j, n))
        idx[j], idx[k] = idx[k], idx[j]
    return np.sort(idx[:s])


def _draw_conditioned_fades(spec, n, rng, threshold):
    """Participant fading magnitudes conditioned on exceeding the threshold
    (rejection resampling)."""
    out = np.empty(n)
    for i in range(n):
        for _ in range(100_000):
            if spec.family == RAYLEIGH:
                h = float(rng.rayleigh(spec.params[0]))
            elif spec.family == UNIFORM:
                h = float(rng.uniform(spec.params[0], spec.params[1]))
            else:
                h = 1.0
            if h > threshold:
                out[i] = h
                break
        else:
            raise RuntimeError("fading family cannot exceed the truncation threshold")
    return out


def _artifact_for(env: RunEnv, kind: AlgorithmKind) -> CalibrationArtifact | None:
    if kind in CONTROLLED_KINDS and kind != AlgorithmKind.SCAFFOLD:
        return env.calib_scaffold
    if kind in (AlgorithmKind.COTAF, AlgorithmKind.BAAF):
        return env.calib_fedavg
    return None


def _aggregated_prior(art: CalibrationArtifact, r: int, members: np.ndarray):
    moments = art.prior_moments(r)
    subset = [moments[i] for i in members]
    return aggregate_prior(subset, len(subset))


def run_trial(
    kind: AlgorithmKind, env: RunEnv, trial: int = 0, keep_history: bool = False
) -> TrialResult:
    """One Monte-Carlo trial of one algorithm over all rounds."""
    cfg = env.cfg
    fed = env.fed
    n = fed.num_users
    d = fed.model_dim
    kind = AlgorithmKind(kind)
    task_kind = fed.task_kind
    noise_var = env.noise_var if kind in CHANNEL_KINDS else 0.0
    sigma_w = np.sqrt(noise_var)
    power = cfg.power
    uses_mmse = kind in MMSE_KINDS
    controlled = kind in CONTROLLED_KINDS
    fading_mode = kind == AlgorithmKind.COBAAF_FADING
    art = _artifact_for(env, kind)
    if art is None and (uses_mmse or kind == AlgorithmKind.COTAF):
        raise ValueError(f"{kind.value} requires a calibration artifact")
    seed = cfg.master_seed
    classification = task_kind == tasks.LOGISTIC_REGRESSION

    if fading_mode:
        spec = cfg.fading
        s_target = spec.participants if spec.participants is not None else n
        # a unit channel leaves nothing to invert: thresholds collapse to 1
        h_min_eff = 1.0 if spec.family == UNIT else spec.h_min
        rho_min_eff = 1.0 if spec.family == UNIT else spec.rho_min
    else:
        s_target = n
        h_min_eff = rho_min_eff = 1.0

    theta = cfg.init_scale * streams.substream(seed, streams.INIT, trial).standard_normal(d)
    d0 = float(np.sum((theta - env.oracle.theta_star) ** 2))

    controls = None
    c_hat = None
    if controlled:
        controls = [
            local_update.refresh_control(
                fed.users[i],
                theta,
                env.refresh_batch,
                streams.substream(seed, streams.REFRESH, trial, 0, i),
                task_kind,
            )
            for i in range(n)
        ]
        c_mean = np.mean(controls, axis=0)
        if kind == AlgorithmKind.SCAFFOLD:
            c_hat = c_mean
        else:
            # warm-start control exchange over the channel before round 1
            beta0 = beta_r(power, art.table, 1)
            scale = sigma_w / (np.sqrt(beta0) * n * rho_min_eff)
            c_tilde = c_mean
            if scale > 0:
                z = streams.substream(seed, streams.NOISE_CTRL, trial, 0).standard_normal(d)
                c_tilde = c_tilde + scale * z
            rec = RecoveredAverage(c_tilde, CONTROL, scale * scale)
            c_hat = mmse_shrink(rec, _aggregated_prior(art, 1, np.arange(n)))

    weights = env.schedule.weights(cfg.rounds)
    weighted_sum = weights[0] * theta
    history = [theta.copy()] if keep_history else None
    metrics: list[RoundMetrics] = []

    for r in range(1, cfg.rounds + 1):
        t_start = time.perf_counter()
        if fading_mode:
            members = select_participants(
                streams.substream(seed, streams.PART, trial, r), n, s_target
            )
            fade_rng = streams.substream(seed, streams.FADE, trial, r)
            fades_h = _draw_conditioned_fades(cfg.fading, len(members), fade_rng, h_min_eff if cfg.fading.family != UNIT else 0.0)
            fades_rho = _draw_conditioned_fades(cfg.fading, len(members), fade_rng, rho_min_eff if cfg.fading.family != UNIT else 0.0)
        else:
            members = np.arange(n)
            fades_h = fades_rho = np.ones(n)
        s_count = len(members)

        alpha = alpha_r(power, art.table, r) if kind in PRECODED_KINDS else None

        deltas = []
        refreshed = {}
        tx_powers = []
        for pos, i in enumerate(members):
            user = fed.users[i]
            if controlled and cfg.control_refresh == "pre_local":
                controls[i] = local_update.refresh_control(
                    user,
                    theta,
                    env.refresh_batch,
                    streams.substream(seed, streams.REFRESH, trial, r, i),
                    task_kind,
                )
            rng_b = streams.substream(seed, streams.BATCH, trial, r, i)
            if controlled:
                theta_i = local_update.local_controlled_round(
                    theta, cfg.k_local, cfg.eta_l, controls[i], c_hat, user,
                    env.batch_size, rng_b, task_kind,
                )
            else:
                theta_i = local_update.local_sgd_round(
                    theta, cfg.k_local, cfg.eta_l, user, env.batch_size, rng_b, task_kind
                )
            delta = theta_i - theta
            deltas.append(delta)
            if controlled and cfg.control_refresh == "post_local":
                refreshed[i] = local_update.refresh_control(
                    user,
                    theta,
                    env.refresh_batch,
                    streams.substream(seed, streams.REFRESH, trial, r, i),
                    task_kind,
                )
            sq = float(delta @ delta)
            if kind == AlgorithmKind.FEDAVG_NOISY:
                tx_powers.append(power * power * sq)
            elif kind in PRECODED_KINDS:
                gain = (h_min_eff / fades_h[pos]) ** 2 if fading_mode else 1.0
                tx_powers.append(alpha * gain * sq)
            else:
                tx_powers.append(0.0)

        mean_delta = np.mean(deltas, axis=0)

        if kind == AlgorithmKind.FEDAVG_NOISY:
            model_scale = sigma_w / (n * power)
        elif kind in PRECODED_KINDS:
            model_scale = sigma_w / (np.sqrt(alpha) * s_count * h_min_eff)
        else:
            model_scale = 0.0

        theta_tilde = theta + mean_delta
        if model_scale > 0:
            z = streams.substream(seed, streams.NOISE_MODEL, trial, r).standard_normal(d)
            theta_tilde = theta_tilde + model_scale * z

        if uses_mmse:
            rec = RecoveredAverage(theta_tilde, MODEL, model_scale * model_scale)
            theta_hat = mmse_shrink(rec, _aggregated_prior(art, r, members))
        else:
            theta_hat = theta_tilde

        if controlled:
            if cfg.control_refresh == "post_local":
                for i, c_new in refreshed.items():
                    controls[i] = c_new
            c_members = np.mean([controls[i] for i in members], axis=0)
            if kind == AlgorithmKind.SCAFFOLD:
                c_hat = c_members
            else:
                beta = beta_r(power, art.table, r)
                ctrl_scale = sigma_w / (np.sqrt(beta) * s_count * rho_min_eff)
                c_tilde = c_members
                if ctrl_scale > 0:
                    zc = streams.substream(seed, streams.NOISE_CTRL, trial, r).standard_normal(d)
                    c_tilde = c_tilde + ctrl_scale * zc
                rec_c = RecoveredAverage(c_tilde, CONTROL, ctrl_scale * ctrl_scale)
                c_hat = mmse_shrink(rec_c, _aggregated_prior(art, r, members))

        theta = theta_hat
        weighted_sum = weighted_sum + weights[r] * theta
        if history is not None:
            history.append(theta.copy())

        gap = tasks.global_loss(fed, theta) - env.oracle.f_star
        acc = (
            tasks.accuracy(env.test_set, theta)
            if classification and env.test_set is not None
            else None
        )
        metrics.append(
            RoundMetrics(
                round=r,
                loss_gap=gap,
                accuracy=acc,
                mean_tx_power=float(np.mean(tx_powers)),
                participants=s_count,
                wallclock=time.perf_counter() - t_start,
            )
        )

    # post-transient summary: mean gap over the final half of the rounds
    window = max(1, cfg.rounds // 2)
    final_window_gap = float(np.mean([m.loss_gap for m in metrics[-window:]]))
    weighted_model = weighted_sum / weights.sum()
    weighted_gap = tasks.global_loss(fed, weighted_model) - env.oracle.f_star
    return TrialResult(
        kind=kind,
        trial=trial,
        metrics=metrics,
        final_gap=metrics[-1].loss_gap,
        final_window_gap=final_window_gap,
        weighted_output_gap=weighted_gap,
        final_accuracy=metrics[-1].accuracy,
        init_distance_sq=d0,
        history=history,
    )


def _single_run(cfg: ExperimentConfig, kind: AlgorithmKind, trial: int) -> list[RoundMetrics]:
    from .harness import prepare_env

    env = prepare_env(cfg)
    return run_trial(kind, env, trial).metrics


def run_fedavg_noiseless(cfg: ExperimentConfig, trial: int = 0) -> list[RoundMetrics]:
    return _single_run(cfg, AlgorithmKind.FEDAVG_NOISELESS, trial)


def run_noisy_fedavg(cfg: ExperimentConfig, trial: int = 0) -> list[RoundMetrics]:
    return _single_run(cfg, AlgorithmKind.FEDAVG_NOISY, trial)


def run_cotaf(cfg: ExperimentConfig, trial: int = 0) -> list[RoundMetrics]:
    return _single_run(cfg, AlgorithmKind.COTAF, trial)


def run_baaf(cfg: ExperimentConfig, trial: int = 0) -> list[RoundMetrics]:
    return _single_run(cfg, AlgorithmKind.BAAF, trial)


def run_scaffold_noiseless(cfg: ExperimentConfig, trial: int = 0) -> list[RoundMetrics]:
    return _single_run(cfg, AlgorithmKind.SCAFFOLD, trial)


def run_cobaaf(cfg: ExperimentConfig, trial: int = 0) -> list[RoundMetrics]:
    return _single_run(cfg, AlgorithmKind.COBAAF, trial)


def run_cobaaf_fading(cfg: ExperimentConfig, trial: int = 0) -> list[RoundMetrics]:
    return _single_run(cfg, AlgorithmKind.COBAAF_FADING, trial)
