"""Run configuration for vjdd.

A :class:`RunConfig` groups the noise ranges, loss weights, model sizes,
motion synthesis bounds, data pipeline, learning-rate schedule, seeds and
paths of a run. Configuration files may be written with nested sections or
with flat dotted keys (``loss.gamma: 0.0``), either as YAML or as plain
``key=value`` lines.
"""
import logging
import math
from importlib import import_module
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml  # type: ignore
from monty.serialization import dumpfn
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from vjdd.core.base import VJDDError

logger = logging.getLogger(__name__)


class ConfigError(VJDDError):
    """Exception raised when a run configuration is invalid."""


ALIASES = {
    "n": "model.buffer_size",
    "g": "loss.long_term_gap",
    "lambda": "loss.lam",
    "alpha": "loss.alpha",
    "beta": "loss.beta",
    "gamma": "loss.gamma",
    "eps": "loss.eps",
    "f_max": "model.f_max",
}


class ConfigSection(BaseModel):
    """Base pydantic model for configuration sections."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class NoiseConfig(ConfigSection):
    """Ranges the training noise parameters are sampled from."""

    sigma_s_min: float = 1e-4
    sigma_s_max: float = 1e-2
    sigma_r_min: float = 1e-3
    sigma_r_max: float = 10**-1.5
    sampling: Literal["log", "linear"] = "log"

    @model_validator(mode="after")
    def check_ranges(self):
        """Check that both ranges are nonempty and strictly positive."""
        for name in ("sigma_s", "sigma_r"):
            lo, hi = getattr(self, f"{name}_min"), getattr(self, f"{name}_max")
            if not (math.isfinite(lo) and math.isfinite(hi)) or not 0 < lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 < min <= max.")
        return self


class LossConfig(ConfigSection):
    """Weights of the total training objective and the Charbonnier floor."""

    lam: float = Field(0.002, ge=0, description="perceptual loss weight")
    alpha: float = Field(0.5, ge=0, description="DTC loss weight")
    beta: float = Field(0.2, ge=0, description="long-term DTC loss weight")
    gamma: float = Field(0.001, ge=0, description="RPC loss weight")
    eps: float = Field(1e-3, gt=0)
    long_term_gap: int = Field(4, ge=2)
    perceptual_model: Optional[str] = None


class ModelConfig(ConfigSection):
    """Network sizes and structural variants."""

    buffer_size: int = Field(5, ge=1)
    feat_channels: int = Field(32, ge=1)
    hidden_channels: int = Field(64, ge=1)
    max_channels: int = Field(256, ge=1)
    f_max: int = Field(16, ge=0)
    hidden_mode: Literal["latent", "none", "shallow"] = "latent"
    hidden_alignment: Literal["none", "global"] = "none"

    @model_validator(mode="after")
    def check_buffer_size(self):
        """The frame buffer is centered, so its size must be odd."""
        if self.buffer_size % 2 == 0:
            raise ValueError(f"buffer_size must be odd, got {self.buffer_size}.")
        return self


class MotionConfig(ConfigSection):
    """Bounds of the random per-step affine motion of synthetic clips."""

    max_translation: float = Field(8.0, ge=0)
    max_rotation: float = Field(2.0, ge=0, description="degrees")
    scale_min: float = Field(0.98, gt=0)
    scale_max: float = Field(1.02, gt=0)
    margin: int = Field(16, ge=0, description="crop-after-warp border in pixels")

    @model_validator(mode="after")
    def check_scale(self):
        """Check the scale range."""
        if self.scale_min > self.scale_max:
            raise ValueError("scale_min must not exceed scale_max.")
        return self


class DataConfig(ConfigSection):
    """Training data pipeline."""

    crop_size: int = Field(32, ge=2)
    clip_len: int = Field(8, ge=2)
    batch_size: int = Field(4, ge=1)
    num_workers: int = Field(0, ge=0)
    train_dirs: List[str] = Field(default_factory=list)
    bayer_pattern: Literal["RGGB", "BGGR", "GRBG", "GBRG"] = "RGGB"

    @model_validator(mode="after")
    def check_crop(self):
        """Crops must tile into Bayer quads."""
        if self.crop_size % 2:
            raise ValueError(f"crop_size must be even, got {self.crop_size}.")
        return self


class ScheduleConfig(ConfigSection):
    """Optimizer and learning-rate schedule."""

    lr: float = Field(1e-4, gt=0)
    lr_floor: float = Field(1e-6, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    pretrain_steps: int = Field(2000, ge=0)
    finetune_steps: int = Field(2000, ge=0)
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(1, ge=1)

    @model_validator(mode="after")
    def check_floor(self):
        """The floor cannot exceed the initial learning rate."""
        if self.lr_floor > self.lr:
            raise ValueError("lr_floor must not exceed lr.")
        return self


class SeedConfig(ConfigSection):
    """Named random streams."""

    data: int = 0
    noise: int = 1
    flow: int = 2
    init: int = 3
    perceptual: int = 4
    eval: int = 1234


class PathsConfig(ConfigSection):
    """Output locations, relative to the working directory of the run."""

    work_dir: str = "."
    checkpoint_dir: str = "checkpoints"
    log_file: str = "train_log.jsonl"


class RunConfig(ConfigSection):
    """Complete configuration of a vjdd run."""

    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    motion: MotionConfig = Field(default_factory=MotionConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def check_long_term_gap(self):
        """Training clips must be longer than the long-term gap when beta > 0."""
        if self.loss.beta > 0 and self.data.clip_len <= self.loss.long_term_gap:
            raise ValueError(
                f"data.clip_len ({self.data.clip_len}) must exceed "
                f"loss.long_term_gap ({self.loss.long_term_gap}) when beta > 0."
            )
        return self

    @classmethod
    def build(cls, data: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """Construct a RunConfig from nested and/or flat dotted keys.

        The short names in :data:`ALIASES` (e.g. ``n``, ``g``, ``lambda``) are
        accepted as top-level keys.
        """
        data = {ALIASES.get(k, k): v for k, v in (data or {}).items()}
        try:
            return cls.model_validate(unflatten(data))
        except ValidationError as exc:
            raise ConfigError(f"Invalid run configuration:\n{exc}") from exc

    def updated(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Return a new configuration with dotted-key overrides applied."""
        data = self.model_dump()
        _deep_update(data, unflatten(overrides))
        return self.build(data)

    def flat(self) -> Dict[str, Any]:
        """Get the configuration as flat dotted keys."""
        return flatten(self.model_dump(mode="json"))

    def as_dict(self):
        """Return a dict representation of the configuration."""
        d = {"@module": self.__class__.__module__, "@class": self.__class__.__name__}
        try:
            parent_module = self.__class__.__module__.split(".", maxsplit=1)[0]
            d["@version"] = str(import_module(parent_module).__version__)
        except (AttributeError, ImportError):
            d["@version"] = None
        d.update(self.model_dump(mode="json"))
        return d

    @classmethod
    def from_dict(cls, d):
        """Construct the configuration from its dict representation."""
        return cls.build({k: v for k, v in d.items() if not k.startswith("@")})

    @classmethod
    def from_file(cls, fname):
        """Construct the configuration from file."""
        return read_config(fname)

    def to_file(self, fname, fmt="yaml"):
        """Write the configuration to file."""
        if fmt == "yaml":
            with open(fname, "w") as f:
                yaml.safe_dump(
                    self.model_dump(mode="json"),
                    f,
                    default_flow_style=False,
                    sort_keys=False,
                )
        else:
            dumpfn(self.as_dict(), fname)


def flatten(d: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Flatten nested mappings into dotted keys."""
    out: Dict[str, Any] = {}
    for key, value in d.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, prefix=f"{name}."))
        else:
            out[name] = value
    return out


def unflatten(d: Dict[str, Any]) -> Dict[str, Any]:
    """Expand dotted keys into nested mappings; nested input is kept."""
    out: Dict[str, Any] = {}
    for key, value in d.items():
        if not isinstance(key, str):
            raise ConfigError(f"Configuration keys must be strings, got {key!r}.")
        if isinstance(value, dict):
            value = unflatten(value)
        *parents, leaf = key.split(".")
        node = out
        for parent in parents:
            node = node.setdefault(parent, {})
            if not isinstance(node, dict):
                raise ConfigError(f'Key "{key}" conflicts with a scalar value.')
        if isinstance(value, dict) and isinstance(node.get(leaf), dict):
            _deep_update(node[leaf], value)
        else:
            node[leaf] = value
    return out


def _deep_update(target: Dict[str, Any], update: Dict[str, Any]):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(target.get(key), dict):
            _deep_update(target[key], value)
        else:
            target[key] = value


def parse_overrides(items: Optional[List[str]]) -> Dict[str, Any]:
    """Parse ``key=value`` strings; values are read as YAML scalars."""
    out: Dict[str, Any] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f'Override "{item}" is not of the form key=value.')
        key, value = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f'Override "{item}" has an empty key.')
        try:
            out[key] = yaml.safe_load(value) if value.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigError(f'Could not parse value of "{item}".') from exc
    return out


def _parse_key_value_lines(text: str) -> Dict[str, Any]:
    lines = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return parse_overrides(lines)


def read_config(path: Union[str, Path]) -> RunConfig:
    """Read a run configuration file.

    Unspecified fields take their defaults; an empty file gives the default
    configuration.
    """
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError:
        data = None
        if "=" not in text:
            raise ConfigError(f"Could not parse configuration file {path}.")
    if data is not None and not isinstance(data, dict):
        data = None
    if data is None and "=" in text:
        data = _parse_key_value_lines(text)
    config = RunConfig.build(data or {})
    logger.debug("Read configuration from %s", path)
    return config
