import gzip
import struct

import numpy as np
import pytest

from otafl.tasks import SyntheticConfig, UserDataset, gen_synthetic


@pytest.fixture
def small_fed():
    """Tiny regression dataset shared by unit tests."""
    return gen_synthetic(SyntheticConfig(num_users=3, samples_per_user=12, dim=4), seed=11)


def write_idx_pair(tmp_path, images: np.ndarray, labels: np.ndarray, gz=False):
    """Write (n, r, c) uint8 images and (n,) uint8 labels as an IDX file pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape if images.size else (images.shape[0], 28, 28)
    img_bytes = struct.pack(">IIII", 2051, n, r, c) + images.tobytes()
    lab_bytes = struct.pack(">II", 2049, len(labels)) + labels.tobytes()
    suffix = ".gz" if gz else ""
    ip = tmp_path / f"images-idx3-ubyte{suffix}"
    lp = tmp_path / f"labels-idx1-ubyte{suffix}"
    ip.write_bytes(gzip.compress(img_bytes) if gz else img_bytes)
    lp.write_bytes(gzip.compress(lab_bytes) if gz else lab_bytes)
    return ip, lp


@pytest.fixture
def toy_classification():
    """Linearly structured 10-class dataset small enough for exact optimization."""
    rng = np.random.default_rng(5)
    n, d = 300, 6
    centers = rng.normal(0, 3, size=(10, d))
    labels = rng.integers(0, 10, size=n)
    feats = centers[labels] + rng.normal(0, 1.0, size=(n, d))
    return UserDataset(feats, labels.astype(np.int64))
