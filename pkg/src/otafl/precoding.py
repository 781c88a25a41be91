"""Time-varying precoding factors and the offline calibration that
estimates their expectation denominators.

alpha^r = P / max_i E||theta_i^r - theta_{i,0}^r||^2 amplifies shrinking
model updates while keeping the average transmit power at P; beta^r does the
same for control transmissions with gradient norms in the denominator.  The
expectations are estimated by noiseless runs of the target algorithm's own
dynamics on a fraction of the data, and stored together with the per-user
Gaussian prior moments those runs yield.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import local_update, tasks
from .priors import PriorMoments
from .streams import CALIB, substream
from .tasks import FederatedDataset

FEDAVG_DYNAMICS = "fedavg"
SCAFFOLD_DYNAMICS = "scaffold"

# keeps alpha/beta finite when a degenerate run produces zero-norm updates
DENOM_FLOOR = 1e-12


@dataclass
class CalibrationTable:
    """Per-round max-over-users expected squared norms of updates (m_theta)
    and refresh gradients (m_c); rounds past the horizon hold the last entry."""

    m_theta: np.ndarray
    m_c: np.ndarray

    def __post_init__(self):
        self.m_theta = np.asarray(self.m_theta, dtype=np.float64)
        self.m_c = np.asarray(self.m_c, dtype=np.float64)
        if self.m_theta.ndim != 1 or self.m_theta.shape != self.m_c.shape:
            raise ValueError("m_theta and m_c must be 1-D arrays of equal length")
        if len(self.m_theta) < 1:
            raise ValueError("need at least one calibrated round")
        for arr in (self.m_theta, self.m_c):
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise ValueError("table entries must be positive and finite")

    @property
    def rounds_covered(self) -> int:
        return len(self.m_theta)

    def _idx(self, r: int) -> int:
        if r < 1:
            raise ValueError("rounds are 1-indexed")
        return min(r, self.rounds_covered) - 1


@dataclass
class CalibrationArtifact:
    """Calibration table plus the per-user per-round prior moments and the
    per-round gradient statistics, as persisted to the calibration file."""

    table: CalibrationTable
    mu: np.ndarray  # (rounds, users) model prior means
    sigma2: np.ndarray  # (rounds, users) model prior variances
    b: np.ndarray  # (rounds, users) control prior means
    v2: np.ndarray  # (rounds, users) control prior variances
    step_grad_sq: np.ndarray  # (rounds, users) mean ||g||^2 over local steps
    algorithm: str
    seed: int
    config_hash: str
    params: dict = field(default_factory=dict)
    version: int = 1

    def prior_moments(self, r: int) -> list[PriorMoments]:
        """Per-user moments for round r (hold-last past the horizon)."""
        idx = self.table._idx(r)
        return [
            PriorMoments(self.mu[idx, i], self.sigma2[idx, i], self.b[idx, i], self.v2[idx, i])
            for i in range(self.mu.shape[1])
        ]


def alpha_r(power: float, table: CalibrationTable, r: int) -> float:
    """Model-update precoding factor P / m_theta^r."""
    if power <= 0:
        raise ValueError("power must be positive")
    return power / table.m_theta[table._idx(r)]


def beta_r(power: float, table: CalibrationTable, r: int) -> float:
    """Control precoding factor P / m_c^r."""
    if power <= 0:
        raise ValueError("power must be positive")
    return power / table.m_c[table._idx(r)]


def precode_update(delta: np.ndarray, alpha: float) -> np.ndarray:
    """Scale a transmission by sqrt(alpha)."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return np.sqrt(alpha) * np.asarray(delta, dtype=np.float64)


class _Pool:
    """Streaming (count, sum, sum-of-squares) moment accumulator."""

    __slots__ = ("n", "s", "ss")

    def __init__(self):
        self.n, self.s, self.ss = 0, 0.0, 0.0

    def add(self, x: np.ndarray):
        self.n += x.size
        self.s += float(x.sum())
        self.ss += float(x @ x)

    def moments(self) -> tuple[float, float]:
        if self.n < 2:
            raise ValueError("need at least 2 samples to estimate a variance")
        mean = self.s / self.n
        var = max((self.ss - self.n * mean * mean) / (self.n - 1), 0.0)
        return mean, var


def _local_round_with_stats(theta0, k, eta, user, batch, rng, kind, correction):
    """K local steps mirroring the client recursion, also returning the mean
    squared gradient norm over the steps."""
    theta = np.array(theta0, dtype=np.float64, copy=True)
    grad_sq = 0.0
    for _ in range(k):
        g = tasks.stochastic_grad(user, theta, batch, rng, kind)
        grad_sq += float(g @ g)
        theta -= eta * (g + correction) if correction is not None else eta * g
    return theta, grad_sq / k


def _subsample(fed: FederatedDataset, frac: float, rng: np.random.Generator) -> FederatedDataset:
    users = []
    for u in fed.users:
        keep = max(1, int(np.ceil(frac * u.num_samples)))
        idx = rng.permutation(u.num_samples)[:keep]
        users.append(tasks.UserDataset(u.features[idx], u.labels[idx]))
    return FederatedDataset(users, fed.task_kind)


def dataset_fingerprint(fed: FederatedDataset) -> str:
    h = hashlib.sha256()
    h.update(fed.task_kind.encode())
    for u in fed.users:
        h.update(np.ascontiguousarray(u.features).tobytes())
        h.update(np.ascontiguousarray(np.asarray(u.labels, dtype=np.float64)).tobytes())
    return h.hexdigest()[:16]


def calibrate(
    fed: FederatedDataset,
    frac: float,
    trials: int,
    rounds: int,
    k_local: int,
    eta_l: float,
    algorithm: str,
    seed: int,
    batch_size: int = 1,
    refresh_batch: int | None = None,
    init_scale: float = 1.0,
) -> CalibrationArtifact:
    """Noiseless runs of the target dynamics on a frac-subsample.

    Records, per round and user, the empirical E||update||^2 and
    E||refresh gradient||^2 (maxed over users into the table) and the pooled
    coordinate moments that become the Gaussian priors.
    """
    if not 0 < frac <= 1:
        raise ValueError("frac must lie in (0, 1]")
    if trials < 1 or rounds < 1:
        raise ValueError("trials and rounds must be >= 1")
    if algorithm not in (FEDAVG_DYNAMICS, SCAFFOLD_DYNAMICS):
        raise ValueError(f"unknown calibration dynamics: {algorithm}")
    if refresh_batch is None:
        refresh_batch = k_local * batch_size
    n, d = fed.num_users, fed.model_dim
    kind = fed.task_kind

    upd_sq = np.zeros((rounds, n))
    grad_sq = np.zeros((rounds, n))
    step_sq = np.zeros((rounds, n))
    model_pools = [[_Pool() for _ in range(n)] for _ in range(rounds)]
    ctrl_pools = [[_Pool() for _ in range(n)] for _ in range(rounds)]

    for t in range(trials):
        sub = _subsample(fed, frac, substream(seed, CALIB, 0, t))
        if any(u.num_samples < batch_size for u in sub.users):
            raise ValueError("subsample smaller than the local batch size")
        theta = init_scale * substream(seed, CALIB, 1, t).standard_normal(d)
        controls = None
        c_hat = None
        if algorithm == SCAFFOLD_DYNAMICS:
            controls = [
                local_update.refresh_control(
                    sub.users[i], theta, refresh_batch, substream(seed, CALIB, 2, t, 0, i), kind
                )
                for i in range(n)
            ]
            c_hat = np.mean(controls, axis=0)
        for r in range(1, rounds + 1):
            deltas = []
            refreshed = []
            for i in range(n):
                rng_b = substream(seed, CALIB, 3, t, r, i)
                corr = None if controls is None else c_hat - controls[i]
                theta_i, gsq = _local_round_with_stats(
                    theta, k_local, eta_l, sub.users[i], batch_size, rng_b, kind, corr
                )
                g_ref = local_update.refresh_control(
                    sub.users[i], theta, refresh_batch, substream(seed, CALIB, 2, t, r, i), kind
                )
                delta = theta_i - theta
                deltas.append(delta)
                refreshed.append(g_ref)
                upd_sq[r - 1, i] += float(delta @ delta)
                grad_sq[r - 1, i] += float(g_ref @ g_ref)
                step_sq[r - 1, i] += gsq
                model_pools[r - 1][i].add(theta_i)
                ctrl_pools[r - 1][i].add(g_ref)
            theta = theta + np.mean(deltas, axis=0)
            if controls is not None:
                controls = refreshed
                c_hat = np.mean(refreshed, axis=0)

    upd_sq /= trials
    grad_sq /= trials
    step_sq /= trials

    mu = np.zeros((rounds, n))
    sigma2 = np.zeros((rounds, n))
    bmat = np.zeros((rounds, n))
    v2 = np.zeros((rounds, n))
    for r in range(rounds):
        for i in range(n):
            mu[r, i], sigma2[r, i] = model_pools[r][i].moments()
            bmat[r, i], v2[r, i] = ctrl_pools[r][i].moments()

    table = CalibrationTable(
        np.maximum(upd_sq.max(axis=1), DENOM_FLOOR),
        np.maximum(grad_sq.max(axis=1), DENOM_FLOOR),
    )
    params = {
        "frac": frac,
        "trials": trials,
        "rounds": rounds,
        "k_local": k_local,
        "eta_l": eta_l,
        "batch_size": batch_size,
        "refresh_batch": refresh_batch,
        "init_scale": init_scale,
        "algorithm": algorithm,
        "seed": seed,
        "dataset": dataset_fingerprint(fed),
    }
    config_hash = hashlib.sha256(
        json.dumps(params, sort_keys=True).encode()
    ).hexdigest()[:16]
    return CalibrationArtifact(
        table=table,
        mu=mu,
        sigma2=sigma2,
        b=bmat,
        v2=v2,
        step_grad_sq=step_sq,
        algorithm=algorithm,
        seed=seed,
        config_hash=config_hash,
        params=params,
    )


def save_artifact(artifact: CalibrationArtifact, path):
    doc = {
        "version": artifact.version,
        "algorithm": artifact.algorithm,
        "seed": artifact.seed,
        "config_hash": artifact.config_hash,
        "params": artifact.params,
        "m_theta": artifact.table.m_theta.tolist(),
        "m_c": artifact.table.m_c.tolist(),
        "mu": artifact.mu.tolist(),
        "sigma2": artifact.sigma2.tolist(),
        "b": artifact.b.tolist(),
        "v2": artifact.v2.tolist(),
        "step_grad_sq": artifact.step_grad_sq.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_artifact(path) -> CalibrationArtifact:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported calibration file version: {doc.get('version')}")
    return CalibrationArtifact(
        table=CalibrationTable(np.array(doc["m_theta"]), np.array(doc["m_c"])),
        mu=np.array(doc["mu"]),
        sigma2=np.array(doc["sigma2"]),
        b=np.array(doc["b"]),
        v2=np.array(doc["v2"]),
        step_grad_sq=np.array(doc["step_grad_sq"]),
        algorithm=doc["algorithm"],
        seed=doc["seed"],
        config_hash=doc["config_hash"],
        params=doc["params"],
    )
