"""Federated task generation, losses, gradients, and ground-truth optima.

Two convex tasks are supported: heterogeneous synthetic linear regression and
multinomial (10-class) logistic regression on MNIST-format data.  Local losses
use the per-sample mean convention f_i = (1/D_i) sum_n l(s_n; theta), so
gradient-moment assumptions scale independently of the dataset size.
"""

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

LINEAR_REGRESSION = "linear_regression"
LOGISTIC_REGRESSION = "logistic_regression"

N_CLASSES = 10
# L2 ridge on the logistic weights; makes the objective strongly convex with
# modulus exactly LOGISTIC_RIDGE.
LOGISTIC_RIDGE = 1e-4


class IdxFormatError(ValueError):
    """Base error for malformed IDX files."""


class IdxBadMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class SyntheticConfig:
    """Knobs of the heterogeneous synthetic regression generator.

    feature_het controls the spread of the per-user feature means a_i and
    model_het the spread of the per-user model means b_i; both zero gives
    identically distributed users up to sampling noise.
    """

    num_users: int
    samples_per_user: int
    dim: int
    feature_het: float = 0.25
    model_het: float = 1.0
    label_noise_std: float = 0.1

    def __post_init__(self):
        if self.num_users < 1:
            raise ValueError("num_users must be >= 1")
        if self.samples_per_user < 1:
            raise ValueError("samples_per_user must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        for name in ("feature_het", "model_het", "label_noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class UserDataset:
    """One user's local data: features (D, d) and labels (D,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if len(self.labels) != self.features.shape[0]:
            raise ValueError("label count must match feature row count")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.labels))):
            raise ValueError("dataset entries must be finite")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


@dataclass
class FederatedDataset:
    """Datasets of all users plus the task kind they share."""

    users: list[UserDataset]
    task_kind: str = LINEAR_REGRESSION

    def __post_init__(self):
        if not self.users:
            raise ValueError("need at least one user")
        if self.task_kind not in (LINEAR_REGRESSION, LOGISTIC_REGRESSION):
            raise ValueError(f"unknown task kind: {self.task_kind}")
        dims = {u.num_features for u in self.users}
        if len(dims) != 1:
            raise ValueError("all users must share the feature dimension")

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def model_dim(self) -> int:
        d = self.users[0].num_features
        if self.task_kind == LOGISTIC_REGRESSION:
            return N_CLASSES * (d + 1)
        return d


@dataclass
class GlobalOptimum:
    """Minimizer of the global objective and its value."""

    theta_star: np.ndarray
    f_star: float


def gen_synthetic(cfg: SyntheticConfig, seed: int) -> FederatedDataset:
    """Draw a heterogeneous regression dataset.

    Per user i: a_i ~ N(1, feature_het) sets the mean of the feature rows,
    A_i rows ~ N(a_i * 1, I); b_i ~ N(-4, model_het) sets the mean of the
    user model theta_i ~ N(b_i * 1, I); labels are A_i theta_i plus Gaussian
    label noise.  Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    d = cfg.dim
    users = []
    for _ in range(cfg.num_users):
        a_i = 1.0 + np.sqrt(cfg.feature_het) * rng.standard_normal()
        feats = a_i + rng.standard_normal((cfg.samples_per_user, d))
        b_i = -4.0 + np.sqrt(cfg.model_het) * rng.standard_normal()
        theta_i = b_i + rng.standard_normal(d)
        noise = cfg.label_noise_std * rng.standard_normal(cfg.samples_per_user)
        labels = feats @ theta_i + noise
        users.append(UserDataset(feats, labels))
    return FederatedDataset(users, LINEAR_REGRESSION)


def _read_idx_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            return gzip.decompress(fh.read())
        return fh.read()


def load_mnist_idx(image_path, label_path) -> UserDataset:
    """Parse big-endian IDX image/label files (optionally gzipped).

    Features come out flattened to 784 floats in [0, 1]; labels as class
    indices.  Raises distinct errors for bad magic numbers, truncated files,
    and image/label count mismatches.
    """
    img = _read_idx_bytes(image_path)
    lab = _read_idx_bytes(label_path)
    if len(img) < 16:
        raise IdxTruncatedError(f"image file too short: {image_path}")
    if len(lab) < 8:
        raise IdxTruncatedError(f"label file too short: {label_path}")
    magic, n_img, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != 2051:
        raise IdxBadMagicError(f"bad image magic {magic:#x} in {image_path}")
    lmagic, n_lab = struct.unpack(">II", lab[:8])
    if lmagic != 2049:
        raise IdxBadMagicError(f"bad label magic {lmagic:#x} in {label_path}")
    if len(img) != 16 + n_img * rows * cols:
        raise IdxTruncatedError(f"image payload size mismatch in {image_path}")
    if len(lab) != 8 + n_lab:
        raise IdxTruncatedError(f"label payload size mismatch in {label_path}")
    if n_img != n_lab:
        raise IdxCountMismatchError(f"{n_img} images but {n_lab} labels")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16)
    feats = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if n_img and (labels.min() < 0 or labels.max() > 9):
        raise IdxFormatError("labels outside 0..9")
    return UserDataset(feats if n_img else feats.reshape(0, rows * cols), labels)


def _split_sizes(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _deal(data: UserDataset, order: np.ndarray, sizes: list[int]) -> list[UserDataset]:
    users, start = [], 0
    for s in sizes:
        idx = order[start : start + s]
        users.append(UserDataset(data.features[idx], data.labels[idx]))
        start += s
    return users


def partition_balanced(data: UserDataset, num_users: int, seed: int) -> FederatedDataset:
    """Shuffled i.i.d. split into near-equal shards; union of shards = input."""
    n = data.num_samples
    if num_users > n:
        raise ValueError(f"cannot split {n} samples across {num_users} users")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    users = _deal(data, order, _split_sizes(n, num_users))
    return FederatedDataset(users, LOGISTIC_REGRESSION)


def partition_imbalanced(
    data: UserDataset, num_users: int, skew_frac: float, seed: int
) -> FederatedDataset:
    """Label-skewed split: ~skew_frac of each user's shard comes from one
    user-specific class, the rest is dealt i.i.d. from the leftover pool."""
    if not 0.0 <= skew_frac <= 1.0:
        raise ValueError("skew_frac must be in [0, 1]")
    if skew_frac == 0.0:
        return partition_balanced(data, num_users, seed)
    n = data.num_samples
    if num_users > n:
        raise ValueError(f"cannot split {n} samples across {num_users} users")
    classes = np.unique(data.labels)
    if num_users > len(classes):
        raise ValueError(f"{num_users} users but only {len(classes)} classes")
    rng = np.random.default_rng(seed)
    sizes = _split_sizes(n, num_users)
    labels = data.labels.astype(np.int64)

    taken = np.zeros(n, dtype=bool)
    skewed_idx: list[np.ndarray] = []
    for u in range(num_users):
        want = int(round(skew_frac * sizes[u]))
        pool = np.flatnonzero(labels == classes[u])
        if want > len(pool):
            raise ValueError(
                f"class {classes[u]} has {len(pool)} samples, user {u} needs {want}"
            )
        pick = rng.permutation(pool)[:want]
        skewed_idx.append(pick)
        taken[pick] = True

    rest = rng.permutation(np.flatnonzero(~taken))
    users, start = [], 0
    for u in range(num_users):
        fill = sizes[u] - len(skewed_idx[u])
        idx = np.concatenate([skewed_idx[u], rest[start : start + fill]])
        start += fill
        users.append(UserDataset(data.features[idx], data.labels[idx]))
    return FederatedDataset(users, LOGISTIC_REGRESSION)


# --- losses and gradients ------------------------------------------------


def _check_theta(theta: np.ndarray):
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")


def _augment(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _logistic_unpack(theta: np.ndarray, d_feat: int) -> np.ndarray:
    return np.asarray(theta).reshape(N_CLASSES, d_feat + 1)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def local_loss(user: UserDataset, theta: np.ndarray, kind: str = LINEAR_REGRESSION) -> float:
    """Per-sample mean loss of one user at theta."""
    _check_theta(theta)
    if kind == LINEAR_REGRESSION:
        r = user.features @ theta - user.labels
        return float(r @ r) / user.num_samples
    if kind == LOGISTIC_REGRESSION:
        w = _logistic_unpack(theta, user.num_features)
        logp = _log_softmax(_augment(user.features) @ w.T)
        ce = -logp[np.arange(user.num_samples), user.labels.astype(np.int64)].mean()
        return float(ce + 0.5 * LOGISTIC_RIDGE * (theta @ theta))
    raise ValueError(f"unknown task kind: {kind}")


def _grad_arrays(features: np.ndarray, labels: np.ndarray, theta: np.ndarray, kind: str) -> np.ndarray:
    n = features.shape[0]
    if kind == LINEAR_REGRESSION:
        r = features @ theta - labels
        return (2.0 / n) * (features.T @ r)
    if kind == LOGISTIC_REGRESSION:
        x = _augment(features)
        w = _logistic_unpack(theta, features.shape[1])
        p = np.exp(_log_softmax(x @ w.T))
        p[np.arange(n), labels.astype(np.int64)] -= 1.0
        g = (p.T @ x) / n
        return g.ravel() + LOGISTIC_RIDGE * np.asarray(theta)
    raise ValueError(f"unknown task kind: {kind}")


def full_grad(user: UserDataset, theta: np.ndarray, kind: str = LINEAR_REGRESSION) -> np.ndarray:
    """Exact gradient of local_loss."""
    _check_theta(theta)
    return _grad_arrays(user.features, user.labels, theta, kind)


def stochastic_grad(
    user: UserDataset,
    theta: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
    kind: str = LINEAR_REGRESSION,
) -> np.ndarray:
    """Unbiased minibatch gradient: uniform draws with replacement.

    batch_size == num_samples short-circuits to the full gradient (every
    sample once, no draws).
    """
    n = user.num_samples
    if n == 0:
        raise ValueError("empty dataset")
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}]")
    if batch_size == n:
        return full_grad(user, theta, kind)
    idx = rng.integers(0, n, size=batch_size)
    return _grad_arrays(user.features[idx], user.labels[idx], theta, kind)


def global_loss(fed: FederatedDataset, theta: np.ndarray) -> float:
    """F(theta): mean of the users' local losses."""
    return float(np.mean([local_loss(u, theta, fed.task_kind) for u in fed.users]))


def global_grad(fed: FederatedDataset, theta: np.ndarray) -> np.ndarray:
    vals = [full_grad(u, theta, fed.task_kind) for u in fed.users]
    return np.mean(vals, axis=0)


def accuracy(user: UserDataset, theta: np.ndarray) -> float:
    """Fraction of samples whose argmax class matches the label."""
    w = _logistic_unpack(theta, user.num_features)
    pred = (_augment(user.features) @ w.T).argmax(axis=1)
    return float(np.mean(pred == user.labels.astype(np.int64)))


# --- global optimum -------------------------------------------------------


class SingularSystemError(np.linalg.LinAlgError):
    pass


def global_optimum(fed: FederatedDataset, ridge: float = 0.0) -> GlobalOptimum:
    """Exact minimizer of the global objective.

    Regression solves the pooled normal equations (optionally ridge-damped
    when the system is singular); logistic runs a full-batch quasi-Newton
    solve to gradient norm <= 1e-8.
    """
    if fed.task_kind == LINEAR_REGRESSION:
        d = fed.model_dim
        m = np.zeros((d, d))
        v = np.zeros(d)
        for u in fed.users:
            m += (u.features.T @ u.features) / u.num_samples
            v += (u.features.T @ u.labels) / u.num_samples
        if ridge > 0.0:
            m = m + ridge * np.eye(d)
        elif np.linalg.cond(m) > 1e12:
            raise SingularSystemError("normal equations singular; pass ridge > 0")
        theta = np.linalg.solve(m, v)
        return GlobalOptimum(theta, global_loss(fed, theta))

    pooled = _PooledLogistic(fed)
    res = minimize(
        pooled.loss_grad,
        np.zeros(fed.model_dim),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 20000, "gtol": 1e-9, "ftol": 0.0, "maxfun": 50000, "maxcor": 50},
    )
    # Newton polish: full steps near the optimum drive the gradient norm to
    # the contract despite the tiny ridge modulus
    theta = pooled.newton_polish(res.x, target=1e-10)
    gnorm = float(np.linalg.norm(global_grad(fed, theta)))
    if gnorm > 1e-8:
        raise RuntimeError(f"logistic optimum did not converge: |grad| = {gnorm:.3e}")
    return GlobalOptimum(theta, global_loss(fed, theta))


class _PooledLogistic:
    """The global logistic objective over the pooled rows, with per-sample
    weights 1/(N D_i) so unequal shard sizes keep the same objective."""

    def __init__(self, fed: FederatedDataset):
        self.x = np.vstack([_augment(u.features) for u in fed.users])
        self.y = np.concatenate([u.labels.astype(np.int64) for u in fed.users])
        self.w = np.concatenate(
            [np.full(u.num_samples, 1.0 / (fed.num_users * u.num_samples)) for u in fed.users]
        )
        self.d_feat = fed.users[0].num_features

    def loss_grad(self, theta):
        wmat = _logistic_unpack(theta, self.d_feat)
        logp = _log_softmax(self.x @ wmat.T)
        loss = -float(self.w @ logp[np.arange(len(self.y)), self.y])
        p = np.exp(logp)
        p[np.arange(len(self.y)), self.y] -= 1.0
        grad = ((self.w[:, None] * p).T @ self.x).ravel()
        theta = np.asarray(theta)
        return loss + 0.5 * LOGISTIC_RIDGE * float(theta @ theta), grad + LOGISTIC_RIDGE * theta

    def hessp(self, theta, v):
        wmat = _logistic_unpack(theta, self.d_feat)
        vmat = _logistic_unpack(np.asarray(v, dtype=np.float64), self.d_feat)
        p = np.exp(_log_softmax(self.x @ wmat.T))
        pu = p * (self.x @ vmat.T)
        pu -= p * pu.sum(axis=1, keepdims=True)
        out = ((self.w[:, None] * pu).T @ self.x).ravel()
        return out + LOGISTIC_RIDGE * np.asarray(v, dtype=np.float64)

    def newton_polish(self, theta, target=1e-10, max_newton=8):
        from scipy.sparse.linalg import LinearOperator, cg

        d = len(theta)
        for _ in range(max_newton):
            _, g = self.loss_grad(theta)
            if np.linalg.norm(g) <= target:
                break
            op = LinearOperator((d, d), matvec=lambda v: self.hessp(theta, v), dtype=np.float64)
            step, _ = cg(op, -g, rtol=1e-10, maxiter=1500)
            theta = theta + step
        return theta


def pooled_hessian_extremes(fed: FederatedDataset) -> tuple[float, float]:
    """(mu, beta): strong-convexity and smoothness moduli of the global loss.

    Regression uses the exact extreme eigenvalues of the pooled Hessian.
    Logistic returns the ridge modulus and an upper curvature bound
    ridge + mean ||x||^2 / 2 (softmax Hessian spectral bound).
    """
    if fed.task_kind == LINEAR_REGRESSION:
        d = fed.model_dim
        h = np.zeros((d, d))
        for u in fed.users:
            h += (2.0 / u.num_samples) * (u.features.T @ u.features)
        h /= fed.num_users
        eigs = np.linalg.eigvalsh(h)
        return float(eigs[0]), float(eigs[-1])
    sq = np.mean([np.mean(np.sum(_augment(u.features) ** 2, axis=1)) for u in fed.users])
    return LOGISTIC_RIDGE, float(LOGISTIC_RIDGE + 0.5 * sq)


def per_user_curvature_extremes(fed: FederatedDataset) -> tuple[float, float]:
    """(mu, beta) valid for every individual local loss: the smallest local
    strong-convexity modulus and the largest local smoothness modulus."""
    if fed.task_kind == LINEAR_REGRESSION:
        lo, hi = np.inf, 0.0
        for u in fed.users:
            eigs = np.linalg.eigvalsh((2.0 / u.num_samples) * (u.features.T @ u.features))
            lo = min(lo, float(eigs[0]))
            hi = max(hi, float(eigs[-1]))
        return lo, hi
    sq = max(np.mean(np.sum(_augment(u.features) ** 2, axis=1)) for u in fed.users)
    return LOGISTIC_RIDGE, float(LOGISTIC_RIDGE + 0.5 * sq)
