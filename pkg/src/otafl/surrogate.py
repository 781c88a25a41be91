"""Stand-in digit dataset in MNIST IDX format.

When the real MNIST files are unavailable, this synthesizes a 10-class
28x28 digit dataset from scikit-learn's bundled 8x8 digits (upscaled,
jittered, and noised), written as standard IDX files so the whole loading
and partitioning pipeline is exercised unchanged.
"""

import gzip
import struct
from pathlib import Path

import numpy as np

TRAIN_IMAGES = "train-images-idx3-ubyte.gz"
TRAIN_LABELS = "train-labels-idx1-ubyte.gz"
TEST_IMAGES = "t10k-images-idx3-ubyte.gz"
TEST_LABELS = "t10k-labels-idx1-ubyte.gz"


def _upscale(img8: np.ndarray) -> np.ndarray:
    big = np.kron(img8, np.ones((3, 3)))  # 24x24
    return np.pad(big, 2)  # 28x28


def _render(base: np.ndarray, rng: np.random.Generator, count: int, labels_base: np.ndarray):
    images = np.empty((count, 28, 28), dtype=np.uint8)
    labels = np.empty(count, dtype=np.uint8)
    picks = rng.integers(0, len(base), size=count)
    for j, idx in enumerate(picks):
        img = base[idx] * (255.0 / 16.0)
        img = np.roll(img, rng.integers(-2, 3), axis=0)
        img = np.roll(img, rng.integers(-2, 3), axis=1)
        img = img + rng.normal(0, 12.0, size=img.shape)
        images[j] = np.clip(img, 0, 255).astype(np.uint8)
        labels[j] = labels_base[idx]
    return images, labels


def _write_idx(path: Path, images: np.ndarray | None, labels: np.ndarray | None):
    if images is not None:
        n = images.shape[0]
        payload = struct.pack(">IIII", 2051, n, 28, 28) + images.tobytes()
    else:
        payload = struct.pack(">II", 2049, len(labels)) + labels.tobytes()
    path.write_bytes(gzip.compress(payload, compresslevel=1))


def synthesize_digits_idx(
    out_dir, n_train: int = 6000, n_test: int = 2000, seed: int = 0
) -> dict[str, str]:
    """Write train/test IDX pairs under out_dir; returns their paths."""
    try:
        from sklearn.datasets import load_digits
    except ImportError as exc:  # pragma: no cover
        raise RuntimeError("surrogate digits need scikit-learn installed") from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    raw = load_digits()
    base = np.array([_upscale(img) for img in raw.images])
    train_x, train_y = _render(base, rng, n_train, raw.target)
    test_x, test_y = _render(base, rng, n_test, raw.target)
    paths = {
        "train_images": out / TRAIN_IMAGES,
        "train_labels": out / TRAIN_LABELS,
        "test_images": out / TEST_IMAGES,
        "test_labels": out / TEST_LABELS,
    }
    _write_idx(paths["train_images"], train_x, None)
    _write_idx(paths["train_labels"], None, train_y)
    _write_idx(paths["test_images"], test_x, None)
    _write_idx(paths["test_labels"], None, test_y)
    return {k: str(v) for k, v in paths.items()}
