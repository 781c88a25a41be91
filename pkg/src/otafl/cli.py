"""Command-line entry point: calibrate, run, plot, reproduce.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from . import harness, precoding, surrogate
from .config import AlgorithmKind, ConfigError, ExperimentConfig, config_from_dict, load_config

FIGS = ("fig1", "fig2", "fig3", "fig4", "fig5")

_SYNTH_ALGS = [
    "fedavg_noisy_const_amp",
    "cotaf",
    "baaf",
    "cobaaf",
    "scaffold_noiseless",
]


def _fig_config(fig: str, out_dir: str, full_scale: bool) -> dict:
    """Pinned desk-scale configs mirroring the reference experiments."""
    synth = {
        "algorithms": _SYNTH_ALGS,
        "num_users": 20,
        "k_local": 10,
        "rounds": 200,
        "eta_l": 1e-2,
        "snr_db": 10.0,
        "power": 1.0,
        "trials": 100 if full_scale else 20,
        "master_seed": 2024,
        "synthetic": {"samples_per_user": 100, "dim": 10},
        "calibration": {"frac": 0.2, "trials": 20},
        "label": fig,
        "output_dir": out_dir,
    }
    if fig == "fig1":
        return synth
    if fig == "fig2":
        synth["num_users"] = 200
        synth["trials"] = 100 if full_scale else 10
        return synth
    if fig == "fig3":
        synth["k_local"] = 20
        return synth

    mnist = {
        "num_users": 10,
        "k_local": 5,
        "rounds": 100,
        "eta_l": 1e-2,
        "snr_db": 10.0,
        "power": 1.0,
        "trials": 100 if full_scale else 5,
        "master_seed": 2024,
        "mnist": {"partition": "balanced", "subset": 6000, "batch_size": 64},
        "calibration": {"frac": 0.2, "trials": 5},
        "label": fig,
        "output_dir": out_dir,
    }
    if fig == "fig4":
        mnist["algorithms"] = ["fedavg_noisy_const_amp", "cotaf", "baaf", "fedavg_noiseless"]
        return mnist
    mnist["algorithms"] = ["fedavg_noisy_const_amp", "cotaf", "cobaaf", "scaffold_noiseless"]
    mnist["mnist"]["partition"] = "imbalanced"
    return mnist


def _ensure_mnist_paths(doc: dict, out_dir: str) -> None:
    """Fill MNIST paths from OTAFL_DATA_DIR, else synthesize surrogate digits."""
    spec = doc.get("mnist")
    if spec is None or spec.get("train_images"):
        return
    data_dir = os.environ.get("OTAFL_DATA_DIR", "")
    stems = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    if data_dir:
        found = {}
        for key, stem in stems.items():
            for suffix in (".gz", ""):
                cand = os.path.join(data_dir, stem + suffix)
                if os.path.exists(cand):
                    found[key] = cand
                    break
        if len(found) == len(stems):
            spec.update(found)
            return
    paths = surrogate.synthesize_digits_idx(Path(out_dir) / "surrogate-digits", seed=7)
    print("note: MNIST files unavailable; using synthesized surrogate digits", file=sys.stderr)
    spec.update(paths)


def _apply_overrides(doc: dict, args) -> dict:
    if getattr(args, "trials", None) is not None:
        doc["trials"] = args.trials
    if getattr(args, "seed", None) is not None:
        doc["master_seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        doc["workers"] = args.workers
    if getattr(args, "out", None):
        doc["output_dir"] = args.out
    if getattr(args, "full_scale", False):
        doc["trials"] = 100
    return doc


def _run_and_emit(cfg: ExperimentConfig) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = harness.run_experiment(cfg)
    base = out / cfg.label
    harness.emit_csv(table, base.with_suffix(".csv"))
    harness.emit_sidecar(table, base.with_suffix(".json"))
    harness.emit_plot(table, base.with_suffix(".svg"), title=cfg.label)
    print(f"wrote {base}.csv, {base}.json, {base}.svg")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    doc = _apply_overrides(cfg.to_json_dict(), args)
    cfg = config_from_dict(doc)
    _run_and_emit(cfg)
    return 0


def _cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    doc = _apply_overrides(cfg.to_json_dict(), args)
    cfg = config_from_dict(doc)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = harness.prepare_env(cfg)
    written = []
    for name, art in (("fedavg", env.calib_fedavg), ("scaffold", env.calib_scaffold)):
        if art is not None:
            path = out / f"calibration_{name}.json"
            precoding.save_artifact(art, path)
            written.append(str(path))
    if not written:
        print("configured algorithms need no calibration", file=sys.stderr)
    else:
        print("wrote " + ", ".join(written))
    return 0


def _cmd_plot(args) -> int:
    table = harness.read_csv(getattr(args, "in"))
    out = args.out or str(Path(getattr(args, "in")).with_suffix(".svg"))
    harness.emit_plot(table, out, title=Path(getattr(args, "in")).stem)
    print(f"wrote {out}")
    return 0


def _cmd_reproduce(args) -> int:
    out_dir = args.out or "results"
    doc = _fig_config(args.figure, out_dir, args.full_scale)
    doc = _apply_overrides(doc, args)
    _ensure_mnist_paths(doc, doc["output_dir"])
    cfg = config_from_dict(doc)
    _run_and_emit(cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otafl", description=__doc__)
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--workers", type=int, help="trial worker processes")
        sp.add_argument("--trials", type=int, help="override Monte-Carlo trial count")
        sp.add_argument("--seed", type=int, help="override master seed")
        sp.add_argument("--full-scale", action="store_true", dest="full_scale",
                        help="run the full 100-trial configuration")

    sp = sub.add_parser("run", help="run an experiment from a JSON config")
    sp.add_argument("--config", required=True)
    common(sp)
    sp.set_defaults(fn=_cmd_run)

    sp = sub.add_parser("calibrate", help="compute and store calibration artifacts")
    sp.add_argument("--config", required=True)
    common(sp)
    sp.set_defaults(fn=_cmd_calibrate)

    sp = sub.add_parser("plot", help="render an SVG from a results CSV")
    sp.add_argument("--in", required=True, dest="in")
    sp.add_argument("--out")
    sp.set_defaults(fn=_cmd_plot)

    sp = sub.add_parser("reproduce", help="rerun a pinned reference experiment")
    sp.add_argument("figure", choices=FIGS)
    common(sp)
    sp.set_defaults(fn=_cmd_reproduce)
    return p


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
