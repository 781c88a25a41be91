"""Experiment runner: Monte-Carlo trials over algorithms, metric
aggregation, CSV/JSON artifacts, and static SVG plots."""

import concurrent.futures
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, precoding, tasks
from .config import (
    CONTROLLED_KINDS,
    AlgorithmKind,
    ConfigError,
    ExperimentConfig,
)
from .local_update import OutputSchedule
from .orchestrator import RunEnv, TrialResult, run_trial
from .precoding import FEDAVG_DYNAMICS, SCAFFOLD_DYNAMICS

CSV_HEADER = "algorithm,round,mean_loss_gap,se_loss_gap,mean_accuracy,se_accuracy,mean_tx_power,participants"


@dataclass
class ResultRow:
    algorithm: str
    round: int
    mean_loss_gap: float
    se_loss_gap: float | None
    mean_accuracy: float | None
    se_accuracy: float | None
    mean_tx_power: float
    participants: int


@dataclass
class ResultTable:
    rows: list[ResultRow]
    per_trial: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def curve(self, algorithm: str) -> tuple[np.ndarray, np.ndarray]:
        pts = [(r.round, r.mean_loss_gap) for r in self.rows if r.algorithm == algorithm]
        pts.sort()
        arr = np.array(pts)
        return arr[:, 0], arr[:, 1]

    def algorithms(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.algorithm not in seen:
                seen.append(r.algorithm)
        return seen


def config_hash(cfg: ExperimentConfig) -> str:
    doc = json.dumps(cfg.to_json_dict(), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _resolve_mnist_path(path: str, name: str) -> str:
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"mnist.{name}: file not found: {path}")
        return path
    data_dir = os.environ.get("OTAFL_DATA_DIR", "")
    stems = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    for suffix in (".gz", ""):
        candidate = os.path.join(data_dir, stems[name] + suffix)
        if data_dir and os.path.exists(candidate):
            return candidate
    raise ConfigError(
        f"mnist.{name}: no path given and OTAFL_DATA_DIR does not provide {stems[name]}"
    )


def _build_dataset(cfg: ExperimentConfig):
    if cfg.synthetic is not None:
        spec = cfg.synthetic
        syn = tasks.SyntheticConfig(
            num_users=cfg.num_users,
            samples_per_user=spec.samples_per_user,
            dim=spec.dim,
            feature_het=spec.feature_het,
            model_het=spec.model_het,
            label_noise_std=spec.label_noise_std,
        )
        return tasks.gen_synthetic(syn, spec.data_seed), None, spec.batch_size
    spec = cfg.mnist
    train = tasks.load_mnist_idx(
        _resolve_mnist_path(spec.train_images, "train_images"),
        _resolve_mnist_path(spec.train_labels, "train_labels"),
    )
    test = tasks.load_mnist_idx(
        _resolve_mnist_path(spec.test_images, "test_images"),
        _resolve_mnist_path(spec.test_labels, "test_labels"),
    )
    if spec.subset and spec.subset < train.num_samples:
        keep = np.random.default_rng(spec.data_seed).permutation(train.num_samples)[: spec.subset]
        train = tasks.UserDataset(train.features[keep], train.labels[keep])
    if spec.partition == "balanced":
        fed = tasks.partition_balanced(train, cfg.num_users, spec.data_seed)
    else:
        fed = tasks.partition_imbalanced(train, cfg.num_users, spec.skew_frac, spec.data_seed)
    return fed, test, spec.batch_size


def _calibration_needs(cfg: ExperimentConfig) -> set[str]:
    needs = set()
    for kind in cfg.algorithms:
        if kind in (AlgorithmKind.COTAF, AlgorithmKind.BAAF):
            needs.add(FEDAVG_DYNAMICS)
        elif kind in CONTROLLED_KINDS and kind != AlgorithmKind.SCAFFOLD:
            needs.add(SCAFFOLD_DYNAMICS)
    return needs


def _calibrate_or_load(cfg: ExperimentConfig, fed, dynamics: str, batch_size: int):
    spec = cfg.calibration
    path = None
    if spec.reuse_path:
        path = Path(spec.reuse_path) / f"calibration_{dynamics}.json"
        if path.exists():
            art = precoding.load_artifact(path)
            if art.params.get("dataset") == precoding.dataset_fingerprint(fed) and art.params.get(
                "rounds", 0
            ) >= cfg.rounds:
                return art
    art = precoding.calibrate(
        fed,
        frac=spec.frac,
        trials=spec.trials,
        rounds=cfg.rounds,
        k_local=cfg.k_local,
        eta_l=cfg.eta_l,
        algorithm=dynamics,
        seed=spec.seed,
        batch_size=batch_size,
        init_scale=cfg.init_scale,
    )
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        precoding.save_artifact(art, path)
    return art


_ORACLE_CACHE: dict[str, object] = {}


def _cached_optimum(fed):
    # equal-size partitions of one pool share the minimizer: key on the
    # pooled rows; unequal shards weight samples differently, key exactly
    sizes = {u.num_samples for u in fed.users}
    if len(sizes) == 1:
        rows = np.vstack([np.column_stack([u.features, u.labels]) for u in fed.users])
        rows = rows[np.lexsort(rows.T)]
        key = (fed.task_kind, len(fed.users), hashlib.sha256(np.ascontiguousarray(rows).tobytes()).hexdigest())
    else:
        key = (fed.task_kind, precoding.dataset_fingerprint(fed))
    if key not in _ORACLE_CACHE:
        _ORACLE_CACHE[key] = tasks.global_optimum(fed)
    return _ORACLE_CACHE[key]


def prepare_env(cfg: ExperimentConfig) -> RunEnv:
    """Build the dataset, oracle, schedule, and calibration artifacts once."""
    fed, test, batch_size = _build_dataset(cfg)
    oracle = _cached_optimum(fed)
    mu, _ = tasks.pooled_hessian_extremes(fed)
    schedule = OutputSchedule(mu_strong=mu, eta_tilde=cfg.k_local * cfg.eta_l)
    env = RunEnv(
        cfg=cfg,
        fed=fed,
        oracle=oracle,
        schedule=schedule,
        batch_size=batch_size,
        refresh_batch=cfg.k_local * batch_size,
        test_set=test,
    )
    needs = _calibration_needs(cfg)
    if FEDAVG_DYNAMICS in needs:
        env.calib_fedavg = _calibrate_or_load(cfg, fed, FEDAVG_DYNAMICS, batch_size)
    if SCAFFOLD_DYNAMICS in needs:
        env.calib_scaffold = _calibrate_or_load(cfg, fed, SCAFFOLD_DYNAMICS, batch_size)
    return env


_WORKER_ENV: RunEnv | None = None


def _init_worker(env: RunEnv):
    global _WORKER_ENV
    _WORKER_ENV = env


def _worker_run(args) -> TrialResult:
    kind, trial = args
    return run_trial(kind, _WORKER_ENV, trial)


def _mean_se(values: list[float | None]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = float(np.mean(vals))
    if len(vals) < 2:
        return mean, None
    return mean, float(np.std(vals, ddof=1) / np.sqrt(len(vals)))


def run_experiment(cfg: ExperimentConfig, env: RunEnv | None = None) -> ResultTable:
    """Run every (algorithm, trial) pair and aggregate per-round statistics.

    Trials are dispatched to a process pool when cfg.workers > 1; results are
    merged by trial index so output is schedule-independent.
    """
    if env is None:
        env = prepare_env(cfg)
    jobs = [(kind, t) for kind in cfg.algorithms for t in range(cfg.trials)]
    if cfg.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=cfg.workers, initializer=_init_worker, initargs=(env,)
        ) as pool:
            results = list(pool.map(_worker_run, jobs, chunksize=1))
    else:
        _init_worker(env)
        results = [_worker_run(job) for job in jobs]

    by_kind: dict[AlgorithmKind, list[TrialResult]] = {k: [] for k in cfg.algorithms}
    for res in results:
        by_kind[res.kind].append(res)
    for kind in by_kind:
        by_kind[kind].sort(key=lambda r: r.trial)

    rows = []
    per_trial = {}
    for kind in cfg.algorithms:
        trials = by_kind[kind]
        for r in range(1, cfg.rounds + 1):
            gaps = [t.metrics[r - 1].loss_gap for t in trials]
            accs = [t.metrics[r - 1].accuracy for t in trials]
            g_mean, g_se = _mean_se(gaps)
            a_mean, a_se = _mean_se(accs)
            rows.append(
                ResultRow(
                    algorithm=kind.value,
                    round=r,
                    mean_loss_gap=g_mean,
                    se_loss_gap=g_se,
                    mean_accuracy=a_mean,
                    se_accuracy=a_se,
                    mean_tx_power=float(np.mean([t.metrics[r - 1].mean_tx_power for t in trials])),
                    participants=int(round(np.mean([t.metrics[r - 1].participants for t in trials]))),
                )
            )
        per_trial[kind.value] = {
            "final_gap": [t.final_gap for t in trials],
            "final_window_gap": [t.final_window_gap for t in trials],
            "weighted_output_gap": [t.weighted_output_gap for t in trials],
            "final_accuracy": [t.final_accuracy for t in trials],
            "init_distance_sq": [t.init_distance_sq for t in trials],
            "gap_curve": [[m.loss_gap for m in t.metrics] for t in trials],
            "accuracy_curve": (
                [[m.accuracy for m in t.metrics] for t in trials]
                if trials and trials[0].metrics[0].accuracy is not None
                else None
            ),
        }

    metadata = {
        "config": cfg.to_json_dict(),
        "config_hash": config_hash(cfg),
        "version": f"otafl-{__version__}",
        "master_seed": cfg.master_seed,
        "trials": cfg.trials,
    }
    return ResultTable(rows=rows, per_trial=per_trial, metadata=metadata)


# --- emitters --------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_csv(table: ResultTable, path) -> None:
    """Write the fixed-schema CSV; byte-identical for identical tables."""
    if not table.rows:
        raise ValueError("cannot emit an empty table")
    lines = [CSV_HEADER]
    for r in table.rows:
        lines.append(
            ",".join(
                [
                    r.algorithm,
                    str(r.round),
                    _fmt(r.mean_loss_gap),
                    _fmt(r.se_loss_gap),
                    _fmt(r.mean_accuracy),
                    _fmt(r.se_accuracy),
                    _fmt(r.mean_tx_power),
                    str(r.participants),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> ResultTable:
    text = Path(path).read_text().strip().split("\n")
    if not text or text[0] != CSV_HEADER:
        raise ValueError(f"{path} does not carry the expected result schema")
    rows = []
    for line in text[1:]:
        parts = line.split(",")
        rows.append(
            ResultRow(
                algorithm=parts[0],
                round=int(parts[1]),
                mean_loss_gap=float(parts[2]),
                se_loss_gap=float(parts[3]) if parts[3] else None,
                mean_accuracy=float(parts[4]) if parts[4] else None,
                se_accuracy=float(parts[5]) if parts[5] else None,
                mean_tx_power=float(parts[6]),
                participants=int(parts[7]),
            )
        )
    return ResultTable(rows=rows)


def emit_sidecar(table: ResultTable, path) -> None:
    """JSON companion: config echo plus per-trial final statistics."""
    doc = {"metadata": table.metadata, "per_trial": table.per_trial}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


_PALETTE = ["#1f77b4", "#d62728", "#9467bd", "#2ca02c", "#e377c2", "#8c564b", "#17becf"]


def emit_plot(table: ResultTable, path, title: str | None = None) -> None:
    """Hand-rolled SVG: one polyline per algorithm; log-y loss gap unless the
    table carries accuracies (then linear-y accuracy)."""
    if not table.rows:
        raise ValueError("cannot plot an empty table")
    algs = table.algorithms()
    use_acc = all(
        any(r.algorithm == a and r.mean_accuracy is not None for r in table.rows) for a in algs
    )
    width, height, ml, mr, mt, mb = 760, 480, 70, 190, 40, 50
    px, py = width - ml - mr, height - mt - mb

    series = {}
    for a in algs:
        pts = [
            (r.round, r.mean_accuracy if use_acc else r.mean_loss_gap)
            for r in table.rows
            if r.algorithm == a
        ]
        pts.sort()
        series[a] = pts
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts if p[1] is not None]
    if use_acc:
        ylo, yhi = min(ys), max(ys)
        if ylo == yhi:
            ylo, yhi = ylo - 0.5, yhi + 0.5
        ytrans = lambda y: (y - ylo) / (yhi - ylo)
        ylabel = "accuracy"
    else:
        floor = 1e-300
        logy = [np.log10(max(y, floor)) for y in ys]
        ylo, yhi = min(logy), max(logy)
        if yhi - ylo < 1e-9:
            ylo, yhi = ylo - 1, yhi + 1
        ytrans = lambda y: (np.log10(max(y, floor)) - ylo) / (yhi - ylo)
        ylabel = "loss gap (log)"
    xlo, xhi = min(xs), max(xs)
    if xlo == xhi:
        xhi = xlo + 1

    def sx(x):
        return ml + px * (x - xlo) / (xhi - xlo)

    def sy(y):
        return mt + py * (1.0 - ytrans(y))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml}" y="{mt - 14}" font-family="sans-serif" font-size="15">{title or "experiment"}</text>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + py}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt + py}" x2="{ml + px}" y2="{mt + py}" stroke="black"/>',
        f'<text x="{ml + px // 2}" y="{height - 12}" font-family="sans-serif" font-size="12">round</text>',
        f'<text x="16" y="{mt + py // 2}" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {mt + py // 2})">{ylabel}</text>',
    ]
    for i, a in enumerate(algs):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(
            f"{sx(x):.2f},{sy(y):.2f}" for x, y in series[a] if y is not None
        )
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = mt + 18 * i + 10
        out.append(
            f'<line x1="{ml + px + 10}" y1="{ly}" x2="{ml + px + 34}" y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        out.append(
            f'<text x="{ml + px + 40}" y="{ly + 4}" font-family="sans-serif" font-size="11">{a}</text>'
        )
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
