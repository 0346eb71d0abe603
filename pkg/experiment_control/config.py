"""
Experiment configuration: a flat key=value .env file read with python-dotenv.
Every key is a field of ExperimentConfig; unknown keys are rejected. Keys not
in the file keep the defaults below (the published hyperparameters).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from dotenv import dotenv_values

from hebbian_engine.autodiff_sgd import SgdConfig
from hebbian_engine.hebbian import Rule
from hebbian_engine.network import FINAL_PROBE, PROBE_NAMES, NetworkSpec, default_network_spec
from hebbian_engine.training import TrainingConfig

METHODS = ("BP", "HPCA", "HPCA_FT")
DATASETS = ("cifar10", "cifar100", "synthetic")

# end-to-end SGD weight decay per dataset
DEFAULT_L2 = {"cifar10": 5e-2, "cifar100": 1e-2, "tinyimagenet": 5e-3, "synthetic": 5e-2}
DEFAULT_TOP_K = {"cifar10": 1, "cifar100": 5, "tinyimagenet": 5, "synthetic": 1}
NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "synthetic": 10}

CONFIG_DIR = Path(__file__).parent
DEFAULTS_FILE = CONFIG_DIR / "defaults.env"
DESK_SCALE = CONFIG_DIR / "desk_scale.env"

# optional keys: an empty value means "use the dataset default"
_OPTIONAL = {"l2": float, "top_k": int}


@dataclass
class ExperimentConfig:
    dataset: str = "cifar10"
    data_dir: str = "data"
    regimes: list[float] = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 25.0, 100.0])
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    probes: list[str] = field(default_factory=lambda: [*PROBE_NAMES, FINAL_PROBE])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    # supervised phases
    epochs: int = 20
    finetune_epochs: int = 20
    batch_size: int = 64
    lr0: float = 1e-3
    momentum: float = 0.9
    nesterov: bool = True
    l2: float | None = None
    classifier_l2: float = 5e-4
    dropout: float = 0.5
    top_k: int | None = None

    # Hebbian phase
    hebbian_epochs: int = 20
    hebbian_lr: float = 1e-3
    hebbian_rule: str = "nonlinear_hpca"
    hebbian_activation: str = "relu"
    mean_momentum: float = 0.1
    layerwise: bool = False

    # architecture
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    widths: list[int] = field(default_factory=lambda: [96, 128, 192, 256, 300])
    pooling: bool = True
    variance_averaged_layers: list[str] = field(default_factory=lambda: ["L4", "L5"])
    image_size: int = 32

    # data
    val_fraction: float = 0.2
    train_limit: int = 0
    test_limit: int = 0
    synthetic_samples: int = 2400

    output_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"Unknown dataset '{self.dataset}', expected one of {DATASETS}")
        for method in self.methods:
            if method not in METHODS:
                raise ValueError(f"Unknown method '{method}', expected one of {METHODS}")
        for probe in [*self.probes, *self.variance_averaged_layers]:
            if probe not in (*PROBE_NAMES, FINAL_PROBE):
                raise ValueError(f"Unknown probe '{probe}'")
        for r in self.regimes:
            if not 0 < r <= 100:
                raise ValueError(f"Regime r must be in (0, 100], got {r}")
        if len(self.widths) != 5:
            raise ValueError(f"widths needs 5 values, got {self.widths}")
        if not self.seeds:
            raise ValueError("At least one seed is required")
        self.hebbian_rule_spec()

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES[self.dataset]

    @property
    def resolved_l2(self) -> float:
        return DEFAULT_L2[self.dataset] if self.l2 is None else self.l2

    @property
    def resolved_top_k(self) -> int:
        return DEFAULT_TOP_K[self.dataset] if self.top_k is None else self.top_k

    def hebbian_rule_spec(self) -> Rule:
        return Rule.from_name(self.hebbian_rule, self.hebbian_activation)

    def network_spec(self) -> NetworkSpec:
        return default_network_spec(
            num_classes=self.num_classes,
            widths=tuple(self.widths),
            input_shape=(3, self.image_size, self.image_size),
            pooling=self.pooling,
            variance_averaged=self.variance_averaged_layers,
            dropout=self.dropout,
        )

    def classifier_training(self) -> TrainingConfig:
        return TrainingConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            sgd=SgdConfig(self.lr0, self.momentum, self.nesterov, self.classifier_l2),
            dropout=self.dropout,
            top_k=self.resolved_top_k,
        )

    def end_to_end_training(self, epochs: int | None = None) -> TrainingConfig:
        return TrainingConfig(
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            sgd=SgdConfig(self.lr0, self.momentum, self.nesterov, self.resolved_l2),
            dropout=self.dropout,
            top_k=self.resolved_top_k,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def overrides(self) -> list[str]:
        """Keys whose value differs from the default."""
        defaults = ExperimentConfig()
        return [
            f.name
            for f in dataclasses.fields(self)
            if getattr(self, f.name) != getattr(defaults, f.name)
        ]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _parse_bool(key: str, text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"Config key '{key}' expects a boolean, got '{text}'")


def parse_value(key: str, text: str | None):
    """Convert the text of one config entry to the type of the matching field."""
    text = "" if text is None else text.strip()
    if key in _OPTIONAL:
        return None if text == "" else _OPTIONAL[key](text)
    default = getattr(ExperimentConfig(), key)
    try:
        if isinstance(default, bool):
            return _parse_bool(key, text)
        if isinstance(default, list):
            element = type(default[0]) if default else str
            return [element(item.strip()) for item in text.split(",") if item.strip()]
        return type(default)(text)
    except ValueError as e:
        raise ValueError(f"Cannot parse config key '{key}' = '{text}': {e}") from e


def config_from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"Unknown config keys: {unknown}")
    base = base or ExperimentConfig()
    return base.replace(**{key: parse_value(key, text) for key, text in values.items()})


def load_config(*paths: str | Path) -> ExperimentConfig:
    """
    Read one or more config files in order; later files override earlier ones.
    """
    config = ExperimentConfig()
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        config = config_from_mapping(dotenv_values(path), config)
    return config
