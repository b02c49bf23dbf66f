"""
Experiment Configuration

Typed, validated configuration for training, Laplace fitting, prediction,
baselines and experiment orchestration.

Provides:
- pydantic section models with documented, range-checked fields
- INI file loading (section headers + flat key = value) with unknown keys
  rejected
- --set section.key=value overrides
- Environment overrides for output directory and log level
"""

import configparser
import logging
import os
import re
import typing
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Type, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from laplace_lora.core.errors import BadConfig

logger = logging.getLogger("laplace-lora.config")

SHIFT_PATTERN = re.compile(r"^(rotate|translate|scale|noise):[-0-9.eE,]+$")


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"


class TaskName(str, Enum):
    """Synthetic task families, or CSV files supplied by the user"""

    GAUSSIANS = "gaussians"
    MOONS = "moons"
    RINGS = "rings"
    CSV = "csv"


class Scope(str, Enum):
    """Which LoRA parameters the Laplace posterior covers

    LA: every adapter in the network
    LLLA: only the adapter pair of the output layer
    FIRSTK: the adapters of the first laplace.first_layers layers
    """

    LA = "LA"
    LLLA = "LLLA"
    FIRSTK = "FIRSTK"


class FisherVariant(str, Enum):
    KFAC = "kfac"
    DIAG = "diag"
    FULL = "full"


class FisherMode(str, Enum):
    """Expectation over labels: exact class weighting or one sampled label"""

    EXACT = "exact"
    MC = "mc"


class TuningMode(str, Enum):
    EVIDENCE = "evidence"
    VALNLL = "valnll"
    FIXED = "fixed"


class Predictor(str, Enum):
    MC_JOINT = "mc_joint"
    MC_INDEP = "mc_indep"
    PROBIT = "probit"
    BRIDGE = "bridge"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TaskConfig(_Section):
    """Data source for an experiment"""

    name: TaskName = Field(default=TaskName.GAUSSIANS, description="Task generator or 'csv'")
    n_classes: int = Field(default=4, ge=2, le=64, description="Number of classes")
    input_dim: int = Field(default=2, ge=2, le=256, description="Feature dimension")
    n_per_class: int = Field(default=50, ge=1, description="Training points per class")
    n_test_per_class: int = Field(default=100, ge=1, description="Test points per class")
    noise: float = Field(default=1.0, ge=0.0, description="Within-class noise scale")
    seed: int = Field(default=0, ge=0, description="Data generation seed")
    train_csv: Optional[str] = Field(default=None, description="Training CSV when name=csv")
    test_csv: Optional[str] = Field(default=None, description="Test CSV when name=csv")

    @model_validator(mode="after")
    def _check_task(self) -> "TaskConfig":
        if self.name == TaskName.MOONS and self.n_classes != 2:
            raise ValueError("moons task requires n_classes = 2")
        if self.name in (TaskName.MOONS, TaskName.RINGS) and self.input_dim != 2:
            raise ValueError(f"{self.name.value} task requires input_dim = 2")
        if self.name == TaskName.CSV and not (self.train_csv and self.test_csv):
            raise ValueError("csv task requires train_csv and test_csv")
        return self


class NetworkConfig(_Section):
    """Shape of the LoRA-adapted MLP; input_dim and n_classes follow the task"""

    hidden: List[int] = Field(default_factory=lambda: [32, 32], description="Hidden widths")
    rank: int = Field(default=2, ge=1, description="LoRA rank of every adapter")
    alpha: float = Field(
        default=4.0, gt=0.0, description="LoRA scale numerator (scale = alpha/rank)"
    )
    activation: Activation = Field(default=Activation.TANH, description="Hidden activation")
    input_dim: int = Field(default=2, ge=1, description="Input features (set from the task)")
    n_classes: int = Field(default=4, ge=2, description="Output classes (set from the task)")

    @property
    def dims(self) -> List[int]:
        return [self.input_dim, *self.hidden, self.n_classes]

    @model_validator(mode="after")
    def _check_rank(self) -> "NetworkConfig":
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        dims = self.dims
        for i in range(len(dims) - 1):
            limit = min(dims[i], dims[i + 1])
            if self.rank > limit:
                raise ValueError(
                    f"rank {self.rank} exceeds min(n_in, n_out) = {limit} for layer {i}"
                )
        return self


class TrainConfig(_Section):
    """MAP fine-tuning by plain SGD"""

    lr: float = Field(default=0.1, gt=0.0, description="SGD learning rate")
    steps: int = Field(default=5000, ge=1, description="Gradient steps")
    batch_size: int = Field(default=8, ge=1, description="Minibatch size")
    weight_decay: float = Field(default=0.0, ge=0.0, description="Training weight decay")
    dropout_rate: float = Field(default=0.1, ge=0.0, lt=1.0, description="LoRA dropout rate")
    checkpoint_every: int = Field(default=1000, ge=1, description="Checkpoint cadence")
    seed: int = Field(default=0, ge=0, description="Training seed")


class LaplaceConfig(_Section):
    """Curvature, prior precision and Laplace scope settings"""

    scopes: List[Scope] = Field(
        default_factory=lambda: [Scope.LLLA, Scope.LA], description="Laplace scopes evaluated"
    )
    variants: List[FisherVariant] = Field(
        default_factory=lambda: [FisherVariant.KFAC], description="Fisher variants evaluated"
    )
    n_kfac: int = Field(default=10, ge=1, description="Rank of the large KFAC factor")
    kfac_batch: int = Field(default=8, ge=1, description="Vectors appended per SVD update")
    fisher_mode: FisherMode = Field(default=FisherMode.EXACT, description="Label expectation")
    tuning: TuningMode = Field(default=TuningMode.EVIDENCE, description="Prior tuning mode")
    prior_precision: float = Field(default=1.0, gt=0.0, description="Initial or fixed lambda")
    first_layers: int = Field(default=1, ge=1, description="Layers covered by the FIRSTK scope")
    per_sublayer: bool = Field(default=False, description="Tune one lambda per sublayer")
    evidence_eta: float = Field(default=0.1, gt=0.0, description="Evidence ascent step")
    evidence_steps: int = Field(default=100, ge=1, description="Evidence ascent steps")
    valnll_eta: float = Field(default=0.1, gt=0.0, description="Validation NLL step size")
    valnll_steps: int = Field(default=1000, ge=1, description="Validation NLL SGD steps")
    valnll_batch: int = Field(default=4, ge=1, description="Validation minibatch size")
    valnll_mc_samples: int = Field(default=1, ge=1, description="Samples per tuning step")
    valnll_eval_every: int = Field(default=50, ge=1, description="Full validation NLL cadence")
    valnll_eval_samples: int = Field(default=100, ge=1, description="Samples for validation NLL")


class PredictConfig(_Section):
    predictor: Predictor = Field(default=Predictor.MC_JOINT, description="Predictive construction")
    n_samples: int = Field(default=1000, ge=1, description="Monte Carlo samples")
    compare: bool = Field(default=False, description="Also report every other predictor")


class BaselineConfig(_Section):
    temperature: bool = Field(default=True, description="Temperature scaling baseline")
    mc_dropout: bool = Field(default=True, description="MC dropout baseline")
    mc_dropout_samples: int = Field(default=10, ge=1, description="MC dropout passes")
    checkpoint_ensemble: bool = Field(default=True, description="Checkpoint ensemble baseline")
    checkpoint_ensemble_size: int = Field(default=3, ge=1, description="Most recent checkpoints")
    deep_ensemble: bool = Field(default=True, description="Deep ensemble baseline")
    deep_ensemble_size: int = Field(default=3, ge=1, description="Independently trained nets")


class ExperimentSection(_Section):
    seeds: List[int] = Field(default_factory=lambda: [0], description="Training seeds")
    eval_every: Optional[int] = Field(
        default=None, ge=1, description="Evaluation cadence (defaults to train.checkpoint_every)"
    )
    shifts: List[str] = Field(
        default_factory=list,
        description="Test-set shifts, e.g. rotate:90, translate:3,3, scale:2, noise:0.5 "
        "(compose with '+')",
    )
    ece_bins: int = Field(default=15, ge=1, description="Equal-width ECE bins")
    val_fraction: float = Field(default=0.2, gt=0.0, lt=1.0, description="Validation carve-out")
    workers: int = Field(default=1, ge=1, description="Concurrent seeds")
    output_dir: str = Field(default="results", description="Output directory")

    @model_validator(mode="after")
    def _check_shifts(self) -> "ExperimentSection":
        for spec in self.shifts:
            for part in spec.split("+"):
                if not SHIFT_PATTERN.match(part.strip()):
                    raise ValueError(f"invalid shift '{part}'")
        return self


class ExperimentConfig(_Section):
    """Complete experiment configuration"""

    task: TaskConfig = Field(default_factory=TaskConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    laplace: LaplaceConfig = Field(default_factory=LaplaceConfig)
    predict: PredictConfig = Field(default_factory=PredictConfig)
    baselines: BaselineConfig = Field(default_factory=BaselineConfig)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)

    @model_validator(mode="before")
    @classmethod
    def _network_follows_task(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        task = data.get("task") or {}
        network = dict(data.get("network") or {})
        if isinstance(task, TaskConfig):
            task = task.model_dump()
        if isinstance(network, BaseModel):
            network = network.model_dump()
        for key, default in (("input_dim", 2), ("n_classes", 4)):
            if key not in network:
                network[key] = task.get(key, default)
        return {**data, "network": network}

    @model_validator(mode="after")
    def _check_dims(self) -> "ExperimentConfig":
        if self.task.name != TaskName.CSV and (
            self.network.input_dim != self.task.input_dim
            or self.network.n_classes != self.task.n_classes
        ):
            raise ValueError("network input_dim/n_classes must match the task")
        n_layers = len(self.network.hidden) + 1
        if Scope.FIRSTK in self.laplace.scopes and self.laplace.first_layers > n_layers:
            raise ValueError(
                f"laplace.first_layers={self.laplace.first_layers} exceeds the {n_layers} layers"
            )
        return self

    @property
    def eval_every(self) -> int:
        return self.experiment.eval_every or self.train.checkpoint_every

    @property
    def needs_validation_split(self) -> bool:
        return self.laplace.tuning == TuningMode.VALNLL or self.baselines.temperature


SECTIONS: Dict[str, Type[_Section]] = {
    "task": TaskConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "laplace": LaplaceConfig,
    "predict": PredictConfig,
    "baselines": BaselineConfig,
    "experiment": ExperimentSection,
}


def _is_list_field(model: Type[_Section], key: str) -> bool:
    field = model.model_fields.get(key)
    if field is None:
        return False
    annotation = field.annotation
    return typing.get_origin(annotation) in (list, List)


def _coerce(model: Type[_Section], key: str, raw: str) -> Any:
    value = raw.strip()
    if _is_list_field(model, key):
        if key == "shifts":
            # translate vectors contain commas, so shifts are separated by ';'
            return [s.strip() for s in value.split(";") if s.strip()]
        return [s.strip() for s in value.split(",") if s.strip()]
    if value.lower() in ("none", "null", ""):
        return None
    return value


def _validate(raw: Dict[str, Dict[str, Any]]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise BadConfig(f"Invalid configuration: {problems}") from e


def _apply(raw: Dict[str, Dict[str, Any]], section: str, key: str, value: str) -> None:
    if section not in SECTIONS:
        raise BadConfig(f"Unknown config section '{section}'")
    model = SECTIONS[section]
    if key not in model.model_fields:
        raise BadConfig(f"Unknown config key '{section}.{key}'")
    raw.setdefault(section, {})[key] = _coerce(model, key, value)


def parse_overrides(overrides: Sequence[str]) -> List[tuple]:
    parsed = []
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise BadConfig(f"Override must look like section.key=value, got '{item}'")
        dotted, value = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        parsed.append((section, key, value))
    return parsed


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()
) -> ExperimentConfig:
    """
    Load and validate an experiment configuration

    Args:
        path: INI file; None starts from defaults
        overrides: "section.key=value" strings applied after the file

    Returns:
        Validated ExperimentConfig

    Raises:
        BadConfig: Unknown section/key, malformed file or failed validation
    """
    raw: Dict[str, Dict[str, Any]] = {}
    if path is not None:
        source = Path(path)
        if not source.exists():
            raise BadConfig(f"Config file not found: {source}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # type: ignore[assignment,method-assign]
        try:
            parser.read(source)
        except configparser.Error as e:
            raise BadConfig(f"Malformed config file {source}: {e}") from e
        for section in parser.sections():
            for key, value in parser.items(section):
                _apply(raw, section, key, value)

    for section, key, value in parse_overrides(overrides):
        _apply(raw, section, key, value)

    config = _validate(raw)
    logger.debug(f"Loaded configuration from {path or 'defaults'}")
    return config


def _default_repr(field: Any) -> str:
    if field.default_factory is not None:
        value = field.default_factory()
    else:
        value = field.default
    if isinstance(value, list):
        return ",".join(v.value if isinstance(v, Enum) else str(v) for v in value) or "''"
    if isinstance(value, Enum):
        return str(value.value)
    return str(value)


def describe_keys() -> str:
    """Every configuration key with its default and description, for --help"""
    lines = ["configuration keys (INI [section] key = value, or --set section.key=value):"]
    for section, model in SECTIONS.items():
        for key, field in model.model_fields.items():
            lines.append(
                f"  {section}.{key} (default {_default_repr(field)}): {field.description or ''}"
            )
    return "\n".join(lines)


class RuntimeSettings(BaseModel):
    """Process-level settings taken from the environment"""

    output_dir: Optional[str] = Field(default=None, description="Output directory override")
    log_level: str = Field(default="INFO", description="Logging level")

    @classmethod
    def from_env(cls) -> "RuntimeSettings":
        """Create settings from environment variables."""
        return cls(
            output_dir=os.getenv("LAPLACE_LORA_OUTPUT_DIR") or None,
            log_level=os.getenv("LAPLACE_LORA_LOG_LEVEL", "INFO").upper(),
        )


__all__ = [
    "Activation",
    "BaselineConfig",
    "ExperimentConfig",
    "ExperimentSection",
    "FisherMode",
    "FisherVariant",
    "LaplaceConfig",
    "NetworkConfig",
    "PredictConfig",
    "Predictor",
    "RuntimeSettings",
    "Scope",
    "TaskConfig",
    "TaskName",
    "TrainConfig",
    "TuningMode",
    "describe_keys",
    "load_config",
    "parse_overrides",
]
