"""Exception hierarchy shared by the library, the CLI and the agents."""

from typing import Optional


class ConvAsrError(Exception):
    """Base class for every error raised by convasr."""


class DimensionError(ConvAsrError, ValueError):
    """Operand shapes do not agree."""


class ContractError(ConvAsrError):
    """A documented precondition was violated by the caller."""


class ConfigError(ConvAsrError, ValueError):
    """Invalid configuration. `key` names the offending dotted key when known."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class InputError(ConvAsrError, ValueError):
    """Bad data handed to the library (empty utterance, unknown token id, ...)."""


class CheckpointError(InputError):
    """Checkpoint file is malformed or does not match the model."""


class NumericAbort(ConvAsrError):
    """Training hit a non-finite loss."""

    def __init__(self, message: str, batch_index: int = -1, grad_norm: float = float("nan")):
        self.batch_index = batch_index
        self.grad_norm = grad_norm
        super().__init__(message)
