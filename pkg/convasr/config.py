"""
Run configuration.

A run is described by YAML with nested sections (`model`, `features`, `optim`,
`data`) plus top-level run keys. The `preset:` key (toy when absent) seeds the
model section; file values and then `key=value` overrides apply on top:

    preset: toy
    epochs: 40
    model:
      dropout: 0.0
    data:
      train: data/train.npz
"""

import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Sequence, Union

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .audio import FeatureConfig
from .errors import ConfigError
from .model import ModelConfig, preset
from .optim import OptimConfig

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "toy"


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: Optional[str] = None
    valid: Optional[str] = None
    vocab: Optional[str] = None
    batch_size: int = Field(default=8, ge=1)
    shuffle: bool = True


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=lambda: preset(DEFAULT_PRESET))
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    seed: int = 0
    epochs: int = Field(default=80, ge=0)
    checkpoint_dir: str = "checkpoints"
    keep_last: int = Field(default=30, ge=0)
    precision: Literal["float32", "float64"] = "float32"


def validation_to_config_error(exc: ValidationError, prefix: Optional[str] = None) -> ConfigError:
    """First pydantic error as a ConfigError keyed by its dotted location under `prefix`."""
    first = exc.errors()[0]
    parts = ([prefix] if prefix else []) + [str(part) for part in first["loc"]]
    return ConfigError(first["msg"], key=".".join(parts) or None)


def build_run_config(values: Dict[str, Any]) -> RunConfig:
    values = dict(values)
    name = values.pop("preset", DEFAULT_PRESET)
    base = OmegaConf.create({"model": preset(str(name)).model_dump()})
    values = OmegaConf.to_container(OmegaConf.merge(base, OmegaConf.create(values)), resolve=True)
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        raise validation_to_config_error(exc) from exc


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Parse a YAML run config and apply dotted `key=value` overrides."""
    try:
        layers = []
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            layers.append(OmegaConf.load(path))
        layers.append(OmegaConf.from_dotlist(list(overrides)))
        merged = OmegaConf.merge(*layers)
        values = OmegaConf.to_container(merged, resolve=True)
    except OmegaConfBaseException as exc:
        raise ConfigError(str(exc).splitlines()[0]) from exc
    if not isinstance(values, dict):
        raise ConfigError("run config must be a mapping")
    cfg = build_run_config(values)
    logger.debug("Config: loaded %s with %d override(s)", path or "<defaults>", len(overrides))
    return cfg


def dump_run_config(cfg: RunConfig, path: Optional[Union[str, Path]] = None) -> str:
    """YAML text of a fully resolved config; written to `path` when given."""
    text = OmegaConf.to_yaml(OmegaConf.create(cfg.model_dump(mode="json")))
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text
