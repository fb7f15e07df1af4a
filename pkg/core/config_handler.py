import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type

from dotenv import dotenv_values

from core.exceptions import ConfigError
from misc.variants_enum import Scenario, Variant


class ConfigPrefix(Enum):
    """
    Enum storing prefixes of keys used in the configuration file for corresponding sections.
    """
    DATA: str = "DATA"
    MODEL: str = "MODEL"
    LOSS: str = "LOSS"
    TRAIN: str = "TRAIN"
    EVAL: str = "EVAL"


@dataclass
class DataConfig:
    """
    Dataclass storing the synthetic dual-domain dataset configuration.
    """
    height: int = 64
    width: int = 96
    d_min: float = 1.0
    d_max: float = 20.0
    focal: float = 48.0
    baseline: float = 0.25
    min_objects: int = 2
    max_objects: int = 5
    scenario: Scenario = Scenario.SYNTHETIC_TO_REAL
    source_texture: float = 0.04
    target_texture: float = 0.12
    fog_density: float = 0.08
    fog_gray: float = 0.7
    train_count: int = 256
    val_count: int = 32
    test_count: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height % 16 or self.width % 16 or self.height <= 0 or self.width <= 0:
            raise ConfigError(f"Image size {self.height}x{self.width} must be divisible by 16")
        if not 0 < self.d_min < self.d_max:
            raise ConfigError(f"Depth range must satisfy 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.focal <= 0 or self.baseline <= 0:
            raise ConfigError("Focal length and baseline must be positive")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("Object count range must satisfy 0 <= min_objects <= max_objects")
        if self.fog_density < 0 or self.source_texture < 0 or self.target_texture < 0:
            raise ConfigError("Style amplitudes and fog density must be non-negative")
        if min(self.train_count, self.val_count, self.test_count) < 0:
            raise ConfigError("Split sizes must be non-negative")

    @property
    def focal_baseline(self) -> float:
        return self.focal * self.baseline


@dataclass
class ModelConfig:
    """
    Dataclass storing the sub-network sizes. The last content and style widths are
    the feature widths C_con and C_sty; they must match because both features share
    the depth decoder stages.
    """
    content_channels: Tuple[int, ...] = (32, 64, 128, 128)
    content_strides: Tuple[int, ...] = (1, 2, 2, 1)
    style_channels: Tuple[int, ...] = (16, 32, 64, 128)
    decoder_channels: Tuple[int, ...] = (128, 64, 32)
    generator_channels: Tuple[int, ...] = (128, 64, 32)
    disc_channels: Tuple[int, ...] = (32, 64, 128)
    perceptual_channels: Tuple[int, ...] = (16, 32, 64, 64, 64)
    perceptual_seed: int = 1234
    perceptual_weights: str = ""
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    init_seed: int = 0

    def __post_init__(self) -> None:
        if len(self.content_channels) != len(self.content_strides):
            raise ConfigError("content_channels and content_strides must have the same length")
        if self.content_channels[-1] != self.style_channels[-1]:
            raise ConfigError(
                f"Content ({self.content_channels[-1]}) and style ({self.style_channels[-1]}) "
                "feature widths must be equal"
            )
        stride = self.total_stride
        if stride & (stride - 1):
            raise ConfigError(f"Total encoder stride {stride} must be a power of two")
        upsamplings = stride.bit_length() - 1
        for name in ("decoder_channels", "generator_channels"):
            if len(getattr(self, name)) != upsamplings + 1:
                raise ConfigError(f"{name} needs {upsamplings + 1} stages for a total stride of {stride}")
        if len(self.perceptual_channels) != 5:
            raise ConfigError("The perceptual extractor has exactly five stages")
        if len(self.disc_channels) != 3:
            raise ConfigError("Discriminators have exactly three stages")
        if not 0 < self.bn_momentum < 1 or self.bn_eps <= 0:
            raise ConfigError("BN momentum must lie in (0, 1) and eps must be positive")

    @property
    def total_stride(self) -> int:
        stride = 1
        for s in self.content_strides:
            stride *= s
        return stride


@dataclass
class LossWeights:
    """
    Dataclass storing every weight of the composite objective.
    """
    w_trans_con: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.25, 1.0)
    w_trans_sty: Tuple[float, ...] = (1.0, 1.0, 1.0, 0.0, 0.0)
    w_recon: Tuple[float, ...] = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
    eta: float = 0.2
    lambda_geo: float = 1.0
    lambda_sm: float = 0.01
    lambda_align: float = 0.01
    lambda_recon: float = 0.5
    lambda_trans: float = 0.05
    alpha_geo: float = 0.425
    beta_geo: float = 0.15
    align_source_label: float = 1.0

    def __post_init__(self) -> None:
        for name in ("w_trans_con", "w_trans_sty", "w_recon"):
            vector = getattr(self, name)
            if len(vector) != 5:
                raise ConfigError(f"{name} needs one weight per perceptual stage (5)")
            if any(w < 0 for w in vector):
                raise ConfigError(f"{name} must be non-negative")
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and value < 0:
                raise ConfigError(f"{f.name} must be non-negative")
        if self.align_source_label not in (0.0, 1.0):
            raise ConfigError("align_source_label must be 0 or 1")


@dataclass
class TrainConfig:
    """
    Dataclass storing the optimization schedule and the ablation variant.
    """
    lr_task: float = 1e-4
    lr_other: float = 2e-5
    decay_power: float = 0.9
    total_steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    variant: Variant = Variant.LFDA_FULL
    grl_max: float = 1.0
    grl_ramp: float = 0.2
    checkpoint_every: int = 500
    log_every: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    detach_translated: bool = True

    def __post_init__(self) -> None:
        if self.lr_task <= 0 or self.lr_other <= 0:
            raise ConfigError("Learning rates must be positive")
        if self.total_steps < 0 or self.batch_size < 2:
            raise ConfigError("total_steps must be >= 0 and batch_size >= 2")
        if not 0 <= self.grl_ramp <= 1:
            raise ConfigError("grl_ramp is a fraction of the total steps")
        if self.checkpoint_every < 0 or self.log_every <= 0:
            raise ConfigError("checkpoint_every must be >= 0 and log_every > 0")


@dataclass
class EvalConfig:
    cap: float = 20.0
    d_min_eval: float = 1e-3
    macs_height: int = 192
    macs_width: int = 640
    translate_samples: int = 4

    def __post_init__(self) -> None:
        if self.cap <= 0 or self.d_min_eval <= 0:
            raise ConfigError("Depth cap and evaluation floor must be positive")


@dataclass
class ExperimentConfig:
    """
    Dataclass bundling every configuration section of one experiment.
    """
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def config_hash(self) -> str:
        return config_digest(self.data, self.model, self.loss, self.train, self.eval)

    def data_hash(self) -> str:
        return config_digest(self.data)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {prefix.value: config_to_dict(getattr(self, attr)) for prefix, attr in _PREFIX_ATTRS.items()}


_PREFIX_TYPES: Dict[ConfigPrefix, Type] = {
    ConfigPrefix.DATA: DataConfig,
    ConfigPrefix.MODEL: ModelConfig,
    ConfigPrefix.LOSS: LossWeights,
    ConfigPrefix.TRAIN: TrainConfig,
    ConfigPrefix.EVAL: EvalConfig,
}

_PREFIX_ATTRS: Dict[ConfigPrefix, str] = {
    ConfigPrefix.DATA: "data",
    ConfigPrefix.MODEL: "model",
    ConfigPrefix.LOSS: "loss",
    ConfigPrefix.TRAIN: "train",
    ConfigPrefix.EVAL: "eval",
}


def config_to_dict(config: Any) -> Dict[str, Any]:
    """
    Converts a configuration dataclass into JSON-compatible values.

    Args:
        config (Any): one of the configuration dataclasses

    Returns:
        Dict[str, Any]: field names mapped onto plain values (Enums by value, tuples as lists)
    """
    def plain(value: Any) -> Any:
        if isinstance(value, Enum):
            return value.value
        if isinstance(value, (tuple, list)):
            return [plain(v) for v in value]
        return value

    return {key: plain(value) for key, value in asdict(config).items()}


def config_digest(*configs: Any) -> str:
    payload = [config_to_dict(c) for c in configs]
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def _parse_number(raw: str) -> float:
    # accepts fractions such as 1/32
    try:
        return float(Fraction(raw.strip()))
    except (ValueError, ZeroDivisionError):
        return float(raw)


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw}")


def _convert(raw: str, hint: Any) -> Any:
    if hint is bool:
        return _parse_bool(raw)
    if hint is int:
        return int(raw)
    if hint is float:
        return _parse_number(raw)
    if hint is str:
        return raw
    if isinstance(hint, type) and issubclass(hint, Enum):
        return hint(raw.strip())
    if typing.get_origin(hint) is tuple:
        item_type = typing.get_args(hint)[0]
        items = [item for item in raw.replace(" ", "").split(",") if item]
        return tuple(_convert(item, item_type) for item in items)
    raise ValueError(f"unsupported field type {hint}")


class ConfigHandler:
    def __init__(
        self, env_file: Optional[Path] = None, overrides: Optional[Dict[str, str]] = None
    ) -> None:
        """
        Constructor

        Args:
            env_file (Optional[Path]): path to the key=value file containing configuration values;
                defaults apply to every key it does not set
            overrides (Optional[Dict[str, str]]): values taking precedence over the file
                (e.g. from --set on the command line)

        Raises:
            ConfigError: if the file does not exist or a key is unknown
        """
        self._config: Dict[str, Optional[str]] = {}
        if env_file is not None:
            env_file = Path(env_file)
            if not env_file.is_file():
                raise ConfigError(f"Configuration file not found: {env_file}")
            self._config.update({k.upper(): v for k, v in dotenv_values(env_file).items()})
        for key, value in (overrides or {}).items():
            self._config[key.upper()] = value
        self._retrieved_configs: Dict[str, Any] = {}
        self._check_known_keys()

    @staticmethod
    def parse_override(assignment: str) -> Tuple[str, str]:
        """
        Splits a KEY=VALUE assignment.

        Args:
            assignment (str): assignment as given on the command line

        Returns:
            Tuple[str, str]: upper-cased key and raw value
        """
        if "=" not in assignment:
            raise ConfigError(f"Override '{assignment}' is not of the form KEY=VALUE")
        key, value = assignment.split("=", 1)
        return key.strip().upper(), value.strip()

    def get_config(self, params_type: ConfigPrefix) -> Any:
        """
        Method returning the configuration dataclass of a section, depending on the prefix.

        Args:
            params_type (ConfigPrefix): prefix of the keys of the section

        Returns:
            Any: DataConfig, ModelConfig, LossWeights, TrainConfig or EvalConfig
        """
        if params_type.value not in self._retrieved_configs:
            cls = _PREFIX_TYPES[params_type]
            hints = typing.get_type_hints(cls)
            kwargs: Dict[str, Any] = {}
            for f in fields(cls):
                key = f"{params_type.value}_{f.name.upper()}"
                raw = self._config.get(key)
                if raw is None:
                    continue
                try:
                    kwargs[f.name] = _convert(raw, hints[f.name])
                except ValueError as e:
                    raise ConfigError(f"Invalid value for {key}: {raw!r} ({e})") from e
            self._retrieved_configs[params_type.value] = cls(**kwargs)

        return self._retrieved_configs[params_type.value]

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            **{attr: self.get_config(prefix) for prefix, attr in _PREFIX_ATTRS.items()}
        )

    def config_hash(self) -> str:
        return self.experiment().config_hash()

    def data_hash(self) -> str:
        return self.experiment().data_hash()

    def _check_known_keys(self) -> None:
        known = {
            f"{prefix.value}_{f.name.upper()}"
            for prefix, cls in _PREFIX_TYPES.items()
            for f in fields(cls)
        }
        unknown = sorted(set(self._config) - known)
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")
