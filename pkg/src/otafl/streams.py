"""Deterministic keyed RNG substreams.

Every source of randomness in a run is drawn from its own generator, keyed by
(master_seed, purpose, trial, round, user, ...).  Streams never interact, so
two algorithms sharing a key consume identical draws regardless of what the
other streams do, and results are independent of worker scheduling.
"""

import numpy as np

# Purpose tags.  Adding a tag never disturbs existing streams.
INIT = 0  # initial global model draw, one per trial
BATCH = 1  # local SGD minibatch draws, per (trial, round, user)
REFRESH = 2  # control-refresh batch draws, per (trial, round, user)
NOISE_MODEL = 3  # channel noise on the model transmission, per (trial, round)
NOISE_CTRL = 4  # channel noise on the control transmission, per (trial, round)
FADE = 5  # fading coefficient draws, per (trial, round)
PART = 6  # participant-set draws, per (trial, round)
CALIB = 7  # calibration-internal streams
PROBE = 8  # constant-estimation probes


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (master_seed, *key)."""
    if master_seed < 0:
        raise ValueError("master_seed must be nonnegative")
    return np.random.default_rng(np.random.SeedSequence([master_seed, *key]))
