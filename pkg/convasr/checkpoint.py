"""
Checkpoint container.

A checkpoint is a safetensors file: little-endian float32 tensors keyed by
path-like parameter names, plus one metadata entry holding a sorted-key JSON
header (format version, model config echo, optimizer constants, epoch,
provenance). Writing a loaded checkpoint reproduces the original bytes.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
from safetensors import safe_open
from safetensors.numpy import save_file

from .errors import CheckpointError
from .model import ConvTransformer, ModelConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER_KEY = "convasr"
CHECKPOINT_GLOB = "checkpoint_*.safetensors"
_CHECKPOINT_RE = re.compile(r"checkpoint_(\d+)\.safetensors$")


def checkpoint_path(directory: Union[str, Path], epoch: int) -> Path:
    return Path(directory) / f"checkpoint_{epoch:04d}.safetensors"


def list_checkpoints(directory: Union[str, Path]) -> List[Path]:
    """Epoch checkpoints in a directory, oldest first."""
    found = []
    for path in Path(directory).glob(CHECKPOINT_GLOB):
        match = _CHECKPOINT_RE.search(path.name)
        if match:
            found.append((int(match.group(1)), path))
    return [path for _, path in sorted(found)]


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    header: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.params = {name: np.ascontiguousarray(arr, dtype="<f4") for name, arr in self.params.items()}
        self.header.setdefault("format_version", FORMAT_VERSION)

    @classmethod
    def from_model(cls, model: ConvTransformer, **header: Any) -> "Checkpoint":
        return cls(
            params={name: p.data for name, p in model.named_parameters()},
            header={"model_config": model.cfg.model_dump(), **header},
        )

    @property
    def model_config(self) -> ModelConfig:
        if "model_config" not in self.header:
            raise CheckpointError("checkpoint header carries no model_config")
        return ModelConfig.model_validate(self.header["model_config"])

    def to_model(self, seed: int = 0) -> ConvTransformer:
        model = ConvTransformer(self.model_config, seed=seed)
        model.load_state_dict(self.params)
        return model.eval()

    def apply_to(self, model: ConvTransformer) -> None:
        model.load_state_dict(self.params)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_file(self.params, str(path), metadata={HEADER_KEY: json.dumps(self.header, sort_keys=True)})
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            with safe_open(str(path), framework="np") as handle:
                metadata = handle.metadata() or {}
                params = {name: handle.get_tensor(name) for name in handle.keys()}
        except Exception as exc:
            raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
        if HEADER_KEY not in metadata:
            raise CheckpointError(f"{path} has no '{HEADER_KEY}' header")
        header = json.loads(metadata[HEADER_KEY])
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
        for name, arr in params.items():
            if arr.dtype != np.float32:
                raise CheckpointError(f"{path}: parameter '{name}' is {arr.dtype}, expected float32")
        return cls(params=params, header=header)
