"""
Training recipe: AdaDelta with a fixed learning rate, global-norm gradient
clipping, no warmup or schedule, one checkpoint per epoch, and averaging of the
trailing checkpoints.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .checkpoint import Checkpoint, checkpoint_path, list_checkpoints
from .errors import CheckpointError, ContractError, DimensionError, InputError, NumericAbort
from .model import Batch, ConvTransformer, token_accuracy
from .tensor import no_grad

logger = logging.getLogger(__name__)

Grads = Union[Dict[str, np.ndarray], List[np.ndarray]]


class OptimConfig(BaseModel):
    lr: float = Field(default=1.0, gt=0.0)
    rho: float = Field(default=0.95, gt=0.0, lt=1.0)
    eps: float = Field(default=1e-6, gt=0.0)
    clip: float = Field(default=10.0, gt=0.0)


class AdaDeltaState:
    """Running averages E[g^2] and E[dx^2] per parameter. The learning rate is read-only."""

    def __init__(self, shapes: Mapping[str, Tuple[int, ...]], rho: float = 0.95, eps: float = 1e-6,
                 lr: float = 1.0, dtype=np.float64):
        self._lr = float(lr)
        self.rho = float(rho)
        self.eps = float(eps)
        self.steps = 0
        self.sq_grad = {name: np.zeros(shape, dtype=dtype) for name, shape in shapes.items()}
        self.sq_delta = {name: np.zeros(shape, dtype=dtype) for name, shape in shapes.items()}

    @property
    def lr(self) -> float:
        return self._lr

    @classmethod
    def for_model(cls, model: ConvTransformer, cfg: OptimConfig) -> "AdaDeltaState":
        params = model.named_parameters()
        first = model.parameters()[0].dtype if model.parameters() else np.float32
        return cls({name: p.shape for name, p in params}, rho=cfg.rho, eps=cfg.eps, lr=cfg.lr, dtype=first)

    def constants(self) -> Dict[str, float]:
        return {"optimizer": "adadelta", "lr": self._lr, "rho": self.rho, "eps": self.eps}


def global_norm(grads: Grads) -> float:
    values = grads.values() if isinstance(grads, Mapping) else grads
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in values)))


def clip_gradients(grads: Grads, threshold: float = 10.0) -> Tuple[Grads, float]:
    """Scale all gradients by threshold/norm when the global L2 norm exceeds threshold.

    Returns the (possibly scaled) gradients and the norm before clipping. Below the
    threshold the very same arrays are returned.
    """
    if threshold <= 0:
        raise ContractError(f"clip threshold must be positive, got {threshold}")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads, norm
    factor = threshold / norm
    if isinstance(grads, Mapping):
        return {name: g * g.dtype.type(factor) for name, g in grads.items()}, norm
    return [g * g.dtype.type(factor) for g in grads], norm


def adadelta_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                  state: AdaDeltaState) -> Dict[str, np.ndarray]:
    """
    One AdaDelta update, returning new parameter arrays and updating `state`:

        E[g^2]  <- rho E[g^2] + (1 - rho) g^2
        dx      <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
        E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
        x       <- x + lr dx
    """
    rho, eps = state.rho, state.eps
    # all shapes first, so a mismatch leaves the accumulators untouched
    for name, x in params.items():
        if name not in grads or name not in state.sq_grad:
            raise DimensionError(f"adadelta: no gradient or accumulator for parameter '{name}'")
        if grads[name].shape != x.shape or state.sq_grad[name].shape != x.shape:
            raise DimensionError(f"adadelta: parameter '{name}' {x.shape} vs gradient {grads[name].shape}")
    updated = {}
    for name, x in params.items():
        g = grads[name]
        sq_grad = rho * state.sq_grad[name] + (1.0 - rho) * g * g
        delta = -np.sqrt(state.sq_delta[name] + eps) / np.sqrt(sq_grad + eps) * g
        state.sq_grad[name] = sq_grad
        state.sq_delta[name] = rho * state.sq_delta[name] + (1.0 - rho) * delta * delta
        updated[name] = (x + state.lr * delta).astype(x.dtype, copy=False)
    state.steps += 1
    return updated


class EpochStats(BaseModel):
    epoch: int = 0
    batches: int = 0
    tokens: int = 0
    mean_loss: float = 0.0
    token_accuracy: float = 0.0
    grad_norm_p50: float = 0.0
    grad_norm_p90: float = 0.0
    grad_norm_max: float = 0.0

    def log_line(self) -> str:
        return (
            f"epoch={self.epoch} batches={self.batches} tokens={self.tokens} mean_loss={self.mean_loss:.6f} "
            f"token_accuracy={self.token_accuracy:.4f} grad_norm_p50={self.grad_norm_p50:.4f} "
            f"grad_norm_p90={self.grad_norm_p90:.4f} grad_norm_max={self.grad_norm_max:.4f}"
        )


def train_epoch(model: ConvTransformer, batches: Iterable[Batch], state: AdaDeltaState,
                clip: float = 10.0, epoch: int = 1) -> Tuple[EpochStats, Optional[Checkpoint]]:
    """forward -> backward -> clip -> AdaDelta per batch; a checkpoint at the end of a non-empty epoch."""
    model.train()
    named = list(model.named_parameters())
    loss_sum, hit_sum, token_sum = 0.0, 0.0, 0
    norms: List[float] = []
    last_norm = float("nan")
    for index, batch in enumerate(batches):
        model.zero_grad()
        loss, logits = model.loss(batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericAbort(
                f"non-finite loss {value} at epoch {epoch} batch {index} (previous grad norm {last_norm:.4f})",
                batch_index=index, grad_norm=last_norm,
            )
        loss.backward()
        grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in named}
        grads, norm = clip_gradients(grads, clip)
        if not np.isfinite(norm):
            raise NumericAbort(f"non-finite gradient norm at epoch {epoch} batch {index}",
                               batch_index=index, grad_norm=norm)
        updated = adadelta_step({name: p.data for name, p in named}, grads, state)
        for name, p in named:
            p.data = updated[name]
        last_norm = norm
        norms.append(norm)
        tokens = batch.num_tokens
        token_sum += tokens
        loss_sum += value * tokens
        hit_sum += token_accuracy(logits.data, batch.targets[:, 1:], batch.target_lengths - 1) * tokens

    if not norms:
        return EpochStats(epoch=epoch), None
    stats = EpochStats(
        epoch=epoch,
        batches=len(norms),
        tokens=token_sum,
        mean_loss=loss_sum / token_sum,
        token_accuracy=hit_sum / token_sum,
        grad_norm_p50=float(np.percentile(norms, 50)),
        grad_norm_p90=float(np.percentile(norms, 90)),
        grad_norm_max=float(np.max(norms)),
    )
    return stats, Checkpoint.from_model(model, epoch=epoch, **state.constants())


def evaluate_loss(model: ConvTransformer, batches: Iterable[Batch]) -> float:
    """Token-weighted mean NLL in inference mode."""
    model.eval()
    total, tokens = 0.0, 0
    with no_grad():
        for batch in batches:
            loss, _ = model.loss(batch)
            total += loss.item() * batch.num_tokens
            tokens += batch.num_tokens
    return total / tokens if tokens else 0.0


def train(model: ConvTransformer, batch_source: Callable[[int], Iterable[Batch]], state: AdaDeltaState,
          epochs: int, checkpoint_dir: Union[str, Path], clip: float = 10.0, keep_last: Optional[int] = 30,
          header: Optional[Dict] = None) -> List[EpochStats]:
    """
    Run `epochs` epochs, writing checkpoint_NNNN.safetensors after each one and one
    record per epoch to metrics.log. Only the newest `keep_last` checkpoints are kept
    (None keeps all).
    """
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    history: List[EpochStats] = []
    metrics_path = checkpoint_dir / "metrics.log"
    for epoch in range(1, epochs + 1):
        stats, ckpt = train_epoch(model, batch_source(epoch), state, clip=clip, epoch=epoch)
        history.append(stats)
        logger.info("Trainer: %s", stats.log_line())
        with open(metrics_path, "a", encoding="utf-8") as f:
            f.write(stats.log_line() + "\n")
        if ckpt is None:
            continue
        ckpt.header.update(header or {})
        ckpt.save(checkpoint_path(checkpoint_dir, epoch))
        if keep_last:
            for stale in list_checkpoints(checkpoint_dir)[:-keep_last]:
                stale.unlink()
                logger.debug("Trainer: removed %s (retention %d)", stale.name, keep_last)
    return history


@dataclass
class CheckpointSet:
    """Trailing checkpoints of a run; every member has the same names and shapes."""

    checkpoints: List[Checkpoint]
    sources: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.checkpoints:
            raise InputError("checkpoint set is empty")
        reference = self.checkpoints[0].params
        for i, ckpt in enumerate(self.checkpoints[1:], start=1):
            for name in sorted(set(reference) | set(ckpt.params)):
                if name not in reference or name not in ckpt.params:
                    raise CheckpointError(f"parameter '{name}' is missing from checkpoint {self._label(i)}")
                if reference[name].shape != ckpt.params[name].shape:
                    raise CheckpointError(
                        f"parameter '{name}' has shape {ckpt.params[name].shape} in checkpoint {self._label(i)}, "
                        f"expected {reference[name].shape}"
                    )

    def _label(self, index: int) -> str:
        return self.sources[index] if index < len(self.sources) else str(index)

    @classmethod
    def from_directory(cls, directory: Union[str, Path], last_n: int = 30) -> "CheckpointSet":
        paths = list_checkpoints(directory)
        if not paths:
            raise InputError(f"no checkpoints in {directory}")
        chosen = paths[-last_n:] if last_n > 0 else paths
        return cls([Checkpoint.load(p) for p in chosen], sources=[p.name for p in chosen])


def average_checkpoints(checkpoints: Union[CheckpointSet, Sequence[Checkpoint]]) -> Checkpoint:
    """Arithmetic mean of every parameter, accumulated in float64."""
    ckpt_set = checkpoints if isinstance(checkpoints, CheckpointSet) else CheckpointSet(list(checkpoints))
    members = ckpt_set.checkpoints
    averaged = {}
    for name in members[0].params:
        total = np.zeros(members[0].params[name].shape, dtype=np.float64)
        for ckpt in members:
            total += ckpt.params[name]
        averaged[name] = total / len(members)
    header = {key: value for key, value in members[-1].header.items() if key != "epoch"}
    header["averaged_from"] = list(ckpt_set.sources) or [str(i) for i in range(len(members))]
    return Checkpoint(params=averaged, header=header)
