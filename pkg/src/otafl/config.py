"""Experiment configuration: dataclasses plus a strict JSON loader.

Unknown keys are errors so config typos never pass silently; every
validation failure names the offending field.
"""

import json
from dataclasses import asdict, dataclass, field
from enum import Enum

from .channel import RAYLEIGH, UNIFORM, UNIT


class ConfigError(ValueError):
    pass


class AlgorithmKind(str, Enum):
    FEDAVG_NOISELESS = "fedavg_noiseless"
    FEDAVG_NOISY = "fedavg_noisy_const_amp"
    COTAF = "cotaf"
    BAAF = "baaf"
    SCAFFOLD = "scaffold_noiseless"
    COBAAF = "cobaaf"
    COBAAF_FADING = "cobaaf_fading"


CONTROLLED_KINDS = frozenset(
    {AlgorithmKind.SCAFFOLD, AlgorithmKind.COBAAF, AlgorithmKind.COBAAF_FADING}
)
CHANNEL_KINDS = frozenset(
    {
        AlgorithmKind.FEDAVG_NOISY,
        AlgorithmKind.COTAF,
        AlgorithmKind.BAAF,
        AlgorithmKind.COBAAF,
        AlgorithmKind.COBAAF_FADING,
    }
)
MMSE_KINDS = frozenset({AlgorithmKind.BAAF, AlgorithmKind.COBAAF, AlgorithmKind.COBAAF_FADING})
PRECODED_KINDS = frozenset(
    {AlgorithmKind.COTAF, AlgorithmKind.BAAF, AlgorithmKind.COBAAF, AlgorithmKind.COBAAF_FADING}
)


@dataclass
class SyntheticSpec:
    """Synthetic regression task parameters (per-user shapes and heterogeneity)."""

    samples_per_user: int = 100
    dim: int = 10
    feature_het: float = 0.25
    model_het: float = 1.0
    label_noise_std: float = 0.1
    data_seed: int = 0
    batch_size: int = 1


@dataclass
class MnistSpec:
    """MNIST-format classification task: IDX file paths and partition mode."""

    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    partition: str = "balanced"  # or "imbalanced"
    skew_frac: float = 0.2
    subset: int = 6000
    data_seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.partition not in ("balanced", "imbalanced"):
            raise ConfigError(f"mnist.partition: unknown mode '{self.partition}'")
        if not 0 <= self.skew_frac <= 1:
            raise ConfigError("mnist.skew_frac: must lie in [0, 1]")


@dataclass
class FadingSpec:
    """Fading family and thresholds for the partial-participation variant."""

    family: str = UNIFORM
    params: tuple = (0.5, 1.5)
    h_min: float = 0.6
    rho_min: float = 0.6
    participants: int | None = None  # S; defaults to N

    def __post_init__(self):
        if self.family not in (UNIT, RAYLEIGH, UNIFORM):
            raise ConfigError(f"fading.family: unknown family '{self.family}'")
        self.params = tuple(self.params)
        if not 0 < self.h_min <= 1 or not 0 < self.rho_min <= 1:
            raise ConfigError("fading thresholds must lie in (0, 1]")


@dataclass
class CalibrationSpec:
    frac: float = 0.2
    trials: int = 20
    reuse_path: str | None = None
    seed: int = 1234

    def __post_init__(self):
        if not 0 < self.frac <= 1:
            raise ConfigError("calibration.frac: must lie in (0, 1]")
        if self.trials < 1:
            raise ConfigError("calibration.trials: must be >= 1")


@dataclass
class ExperimentConfig:
    algorithms: list[AlgorithmKind] = field(
        default_factory=lambda: [AlgorithmKind.FEDAVG_NOISELESS]
    )
    num_users: int = 20
    k_local: int = 10
    rounds: int = 200
    eta_l: float = 1e-2
    snr_db: float | None = 10.0
    noise_var: float | None = None
    power: float = 1.0
    trials: int = 20
    master_seed: int = 0
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    mnist: MnistSpec | None = None
    fading: FadingSpec | None = None
    calibration: CalibrationSpec = field(default_factory=CalibrationSpec)
    control_refresh: str = "post_local"  # or "pre_local"
    init_scale: float = 1.0  # theta^0 ~ N(0, init_scale^2 I)
    output_dir: str = "results"
    workers: int = 1
    label: str = "experiment"

    def __post_init__(self):
        self.algorithms = [AlgorithmKind(a) for a in self.algorithms]
        if not self.algorithms:
            raise ConfigError("algorithms: must name at least one algorithm")
        for name in ("num_users", "k_local", "rounds", "trials", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.eta_l < 0:
            raise ConfigError("eta_l: must be nonnegative")
        if self.init_scale <= 0:
            raise ConfigError("init_scale: must be positive")
        if self.power <= 0:
            raise ConfigError("power: must be positive")
        if (self.snr_db is None) == (self.noise_var is None):
            raise ConfigError("set exactly one of snr_db and noise_var")
        if self.master_seed < 0:
            raise ConfigError("master_seed: must be nonnegative")
        if (self.synthetic is None) == (self.mnist is None):
            raise ConfigError("set exactly one of synthetic and mnist")
        if self.control_refresh not in ("post_local", "pre_local"):
            raise ConfigError("control_refresh: must be 'post_local' or 'pre_local'")
        if AlgorithmKind.COBAAF_FADING in self.algorithms and self.fading is None:
            raise ConfigError("cobaaf_fading requires a fading section")
        if self.fading is not None and self.fading.participants is not None:
            if not 1 <= self.fading.participants <= self.num_users:
                raise ConfigError("fading.participants: must lie in [1, num_users]")

    @property
    def resolved_noise_var(self) -> float:
        if self.noise_var is not None:
            return self.noise_var
        return self.power / 10.0 ** (self.snr_db / 10.0)

    def to_json_dict(self) -> dict:
        doc = asdict(self)
        doc["algorithms"] = [a.value for a in self.algorithms]
        for key in ("synthetic", "mnist", "fading"):
            if doc[key] is None:
                del doc[key]
        if doc.get("fading") and doc["fading"]["participants"] is None:
            del doc["fading"]["participants"]
        return doc


_SECTION_TYPES = {
    "synthetic": SyntheticSpec,
    "mnist": MnistSpec,
    "fading": FadingSpec,
    "calibration": CalibrationSpec,
}


def _build_section(cls, doc: dict, section: str):
    allowed = set(cls.__dataclass_fields__)
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {sorted(unknown)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    doc = dict(doc)
    sections = {}
    for key, cls in _SECTION_TYPES.items():
        if key in doc and doc[key] is not None:
            sections[key] = _build_section(cls, doc.pop(key), key)
        else:
            doc.pop(key, None)
    allowed = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)}")
    if "synthetic" not in sections and "mnist" in sections:
        doc["synthetic"] = None
    try:
        return ExperimentConfig(**doc, **sections)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    return config_from_dict(doc)
