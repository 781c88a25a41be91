"""Uplink multiple-access channel: superposition, AWGN, block fading.

Transmitters pre-compensate the channel phase (they have CSI), so the
effective per-user channel is the real magnitude h_i and the whole
simulation stays in real arithmetic.  The received vector is
sum_i h_i x_i + w with w ~ N(0, noise_var I).
"""

from dataclasses import dataclass

import numpy as np

UNIT = "unit"
RAYLEIGH = "rayleigh"
UNIFORM = "uniform"


@dataclass
class ChannelConfig:
    """Power budget, noise level, and fading family of the uplink MAC.

    Exactly one of noise_var / snr_db must be given; snr is defined per
    coordinate as P / noise_var.
    """

    power: float = 1.0
    noise_var: float | None = None
    snr_db: float | None = None
    fading: str = UNIT
    fading_params: tuple = ()
    h_min: float = 1.0
    rho_min: float = 1.0

    def __post_init__(self):
        if self.power <= 0:
            raise ValueError("power must be positive")
        if (self.noise_var is None) == (self.snr_db is None):
            raise ValueError("set exactly one of noise_var and snr_db")
        if self.noise_var is not None and self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")
        if not 0 < self.h_min <= 1 or not 0 < self.rho_min <= 1:
            raise ValueError("h_min and rho_min must lie in (0, 1]")
        if self.fading not in (UNIT, RAYLEIGH, UNIFORM):
            raise ValueError(f"unknown fading family: {self.fading}")
        if self.fading == RAYLEIGH:
            if len(self.fading_params) != 1 or self.fading_params[0] <= 0:
                raise ValueError("rayleigh needs one positive scale parameter")
        if self.fading == UNIFORM:
            if len(self.fading_params) != 2 or not 0 < self.fading_params[0] < self.fading_params[1]:
                raise ValueError("uniform needs 0 < lo < hi")

    def resolved_noise_var(self) -> float:
        if self.noise_var is not None:
            return self.noise_var
        return snr_to_noise(self.snr_db, self.power)


@dataclass
class FadeDraw:
    """One round's per-user fading magnitudes and phases."""

    magnitudes: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        self.phases = np.asarray(self.phases, dtype=np.float64)
        if self.magnitudes.shape != self.phases.shape:
            raise ValueError("magnitudes and phases must have the same length")
        if not np.all(np.isfinite(self.magnitudes)) or np.any(self.magnitudes <= 0):
            raise ValueError("fading magnitudes must be positive and finite")

    def __len__(self) -> int:
        return len(self.magnitudes)


def snr_to_noise(snr_db: float, power: float) -> float:
    """Per-coordinate noise variance giving the requested SNR at power P."""
    if power <= 0:
        raise ValueError("power must be positive")
    return power / 10.0 ** (snr_db / 10.0)


def draw_fading(cfg: ChannelConfig, n: int, rng: np.random.Generator) -> FadeDraw:
    """I.i.d. magnitudes from the configured family; phases uniform on [-pi, pi].

    The unit family is exactly h = 1, phase = 0 (no draws consumed).
    """
    if n < 1:
        raise ValueError("need at least one user")
    if cfg.fading == UNIT:
        return FadeDraw(np.ones(n), np.zeros(n))
    if cfg.fading == RAYLEIGH:
        mags = rng.rayleigh(cfg.fading_params[0], size=n)
    else:
        lo, hi = cfg.fading_params
        mags = rng.uniform(lo, hi, size=n)
    phases = rng.uniform(-np.pi, np.pi, size=n)
    return FadeDraw(mags, phases)


def mac_transmit(
    inputs: list[np.ndarray],
    fades: FadeDraw,
    noise_var: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Superpose the transmitted vectors and add Gaussian noise.

    Summation runs in ascending user order for bit reproducibility.  Phases
    are assumed pre-compensated at the transmitters, so only magnitudes act.
    """
    if len(inputs) != len(fades):
        raise ValueError("one fade per transmitted vector required")
    if not inputs:
        raise ValueError("no transmissions")
    d = len(inputs[0])
    out = np.zeros(d)
    for h, x in zip(fades.magnitudes, inputs):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (d,):
            raise ValueError("all inputs must share the dimension")
        out += h * x
    if noise_var > 0:
        out += np.sqrt(noise_var) * rng.standard_normal(d)
    return out


def truncated_inversion_precode(
    update: np.ndarray, h: float, phase: float, h_min: float, amp: float
) -> np.ndarray | None:
    """Truncated channel inversion: transmit (sqrt(amp) h_min / h) * update
    when h > h_min, stay silent otherwise (returns None).

    The e^{-j phase} factor cancels the channel phase at the receiver; with
    real-vector signals it leaves only the magnitude scaling applied here.
    """
    if h <= 0:
        raise ValueError("fading magnitude must be positive")
    if h <= h_min:
        return None
    return (np.sqrt(amp) * h_min / h) * np.asarray(update, dtype=np.float64)


def audit_power(x: np.ndarray, power: float) -> float:
    """Squared norm of one channel input; callers average these against the
    budget `power` (the constraint holds in expectation)."""
    x = np.asarray(x, dtype=np.float64)
    return float(x @ x)
