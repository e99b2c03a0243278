"""
Neural building blocks: attention, layer norm, feed-forward, transformer block,
encoder 2-D conv block, decoder causal 1-D conv block, embeddings and the
sinusoidal positional table.

Modules keep their parameters as `Tensor` attributes (lists of sub-modules are
allowed) so `named_parameters()` yields path-like names such as
`encoder_blocks.0.self_attn.q_proj.weight`.
"""

import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError, DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5


class AttentionConfig(BaseModel):
    d_input: int = Field(ge=1)
    d_k: int = Field(ge=1)
    d_v: int = Field(ge=1)
    h: int = Field(ge=1)
    d_out: int = Field(ge=1)

    @property
    def concat_width(self) -> int:
        return self.h * self.d_v

    @classmethod
    def for_width(cls, d_model: int, heads: int) -> "AttentionConfig":
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}", key="model.heads")
        head_dim = d_model // heads
        return cls(d_input=d_model, d_k=head_dim, d_v=head_dim, h=heads, d_out=d_model)


class ConvBlockConfig(BaseModel):
    """`kernel` and `channels` may be given once for the block or once per layer."""

    num_layers: int = Field(ge=1)
    kernel: Union[int, List[int]] = 3
    channels: Union[int, List[int]] = 64
    pool: Optional[int] = Field(default=None, ge=1)
    allow_even_kernel: bool = False

    @model_validator(mode="after")
    def _expand_per_layer(self) -> "ConvBlockConfig":
        for name in ("kernel", "channels"):
            value = getattr(self, name)
            values = [value] * self.num_layers if isinstance(value, int) else list(value)
            if len(values) != self.num_layers:
                raise ValueError(f"{name} lists {len(values)} entries for {self.num_layers} layers")
            if any(v < 1 for v in values):
                raise ValueError(f"{name} entries must be >= 1, got {values}")
            setattr(self, name, values)
        if not self.allow_even_kernel and any(k % 2 == 0 for k in self.kernel):
            raise ValueError(f"even kernel in {self.kernel}; set allow_even_kernel to use one")
        return self

    @property
    def kernels(self) -> List[int]:
        return list(self.kernel)

    @property
    def widths(self) -> List[int]:
        return list(self.channels)


def init_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Minimal container: parameter discovery, train/eval switch, state dicts."""

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            children = value if isinstance(value, (list, tuple)) else [value]
            for child in children:
                if isinstance(child, Module):
                    yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        for name, param in own.items():
            if name not in state:
                raise CheckpointError(f"missing parameter '{name}'")
            if tuple(state[name].shape) != param.shape:
                raise CheckpointError(
                    f"parameter '{name}' has shape {tuple(state[name].shape)}, model expects {param.shape}"
                )
        if strict:
            extra = [name for name in state if name not in own]
            if extra:
                raise CheckpointError(f"unexpected parameter '{extra[0]}'")
        for name, param in own.items():
            param.data = np.array(state[name], dtype=T.get_dtype())
            param.zero_grad()


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity at inference or when rate is 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = init_uniform(rng, (d_in, d_out), d_in)
        self.bias = init_uniform(rng, (d_out,), d_in)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"linear: input width {x.shape[-1]} != {self.weight.shape[0]}")
        return x @ self.weight + self.bias

    @staticmethod
    def num_params(d_in: int, d_out: int) -> int:
        return d_in * d_out + d_out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LAYER_NORM_EPS):
        super().__init__()
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)

    @staticmethod
    def num_params(dim: int) -> int:
        return 2 * dim


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-position normalization over the last axis followed by gain and bias."""
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm: last axis is empty")
    return T.layer_norm(x, gain, bias, eps)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = init_uniform(rng, (vocab_size, dim), dim)

    def forward(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weight, ids)

    @staticmethod
    def num_params(vocab_size: int, dim: int) -> int:
        return vocab_size * dim


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        fan_in = c_in * kernel * kernel
        self.weight = init_uniform(rng, (c_out, c_in, kernel, kernel), fan_in)
        self.bias = init_uniform(rng, (c_out,), fan_in)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)

    @staticmethod
    def num_params(c_in: int, c_out: int, kernel: int) -> int:
        return c_out * c_in * kernel * kernel + c_out


class CausalConv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        fan_in = c_in * kernel
        self.weight = init_uniform(rng, (c_out, c_in, kernel), fan_in)
        self.bias = init_uniform(rng, (c_out,), fan_in)

    def forward(self, x: Tensor) -> Tensor:
        return T.causal_conv1d(x, self.weight, self.bias)

    @staticmethod
    def num_params(c_in: int, c_out: int, kernel: int) -> int:
        return c_out * c_in * kernel + c_out


def additive_mask(mask: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Turn a boolean attend-mask into 0 / -inf logits offsets of the given shape."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("attention mask blocks every key for some query row")
    offsets = np.where(mask, 0.0, T.MASK_SENTINEL).astype(T.get_dtype())
    try:
        return np.broadcast_to(offsets, shape)
    except ValueError as exc:
        raise DimensionError(f"attention mask {mask.shape} does not fit logits {shape}") from exc


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(x, axes)


def attention_weights(q: Tensor, k: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(QK^T / sqrt(d_k) + mask offsets) over the key axis."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: query width {q.shape[-1]} != key width {k.shape[-1]}")
    logits = T.scale(T.matmul(q, _swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        logits = logits + Tensor(additive_mask(mask, logits.shape))
    return T.softmax(logits, axis=-1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    return T.matmul(attention_weights(q, k, mask), v)


class MultiHeadAttention(Module):
    """
    h parallel (query, key, value) projections, scaled dot-product attention per
    head, heads concatenated to h*d_v and projected to d_out. The per-head
    projections are stored side by side in one matrix per role.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self._cfg = cfg
        self.q_proj = Linear(cfg.d_input, cfg.h * cfg.d_k, rng)
        self.k_proj = Linear(cfg.d_input, cfg.h * cfg.d_k, rng)
        self.v_proj = Linear(cfg.d_input, cfg.h * cfg.d_v, rng)
        self.out_proj = Linear(cfg.concat_width, cfg.d_out, rng)

    @property
    def cfg(self) -> AttentionConfig:
        return self._cfg

    def _split_heads(self, x: Tensor, width: int) -> Tensor:
        lead = x.shape[:-2]
        steps = x.shape[-2]
        n = len(lead)
        x = T.reshape(x, lead + (steps, self._cfg.h, width))
        return T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))

    def _merge_heads(self, x: Tensor) -> Tensor:
        lead = x.shape[:-3]
        n = len(lead)
        steps = x.shape[-2]
        x = T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
        return T.reshape(x, lead + (steps, self._cfg.concat_width))

    def _head_mask(self, mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
        if mask is None:
            return None
        mask = np.asarray(mask, dtype=bool)
        return np.expand_dims(mask, -3) if mask.ndim >= 3 else mask

    def _check(self, x_q: Tensor, x_kv: Tensor) -> None:
        d = self._cfg.d_input
        if x_q.shape[-1] != d or x_kv.shape[-1] != d:
            raise DimensionError(f"multi-head attention expects width {d}, got {x_q.shape} and {x_kv.shape}")

    def weights(self, x_q: Tensor, x_kv: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """Attention weights per head, shape [..., h, T_q, T_k]."""
        self._check(x_q, x_kv)
        q = self._split_heads(self.q_proj(x_q), self._cfg.d_k)
        k = self._split_heads(self.k_proj(x_kv), self._cfg.d_k)
        return attention_weights(q, k, self._head_mask(mask))

    def forward(self, x_q: Tensor, x_kv: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        self._check(x_q, x_kv)
        q = self._split_heads(self.q_proj(x_q), self._cfg.d_k)
        k = self._split_heads(self.k_proj(x_kv), self._cfg.d_k)
        v = self._split_heads(self.v_proj(x_kv), self._cfg.d_v)
        heads = scaled_dot_attention(q, k, v, self._head_mask(mask))
        return self.out_proj(self._merge_heads(heads))

    @staticmethod
    def num_params(cfg: AttentionConfig) -> int:
        return (
            2 * Linear.num_params(cfg.d_input, cfg.h * cfg.d_k)
            + Linear.num_params(cfg.d_input, cfg.h * cfg.d_v)
            + Linear.num_params(cfg.concat_width, cfg.d_out)
        )


class FeedForward(Module):
    def __init__(self, d_model: int, width: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d_model, width, rng)
        self.fc2 = Linear(width, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))

    @staticmethod
    def num_params(d_model: int, width: int) -> int:
        return Linear.num_params(d_model, width) + Linear.num_params(width, d_model)


class TransformerBlock(Module):
    """
    Post-norm transformer block.

    self-attention -> dropout -> residual -> layer norm
    [encoder attention -> dropout -> residual -> layer norm]   (decoder blocks)
    FFN (linear, ReLU, linear) -> dropout -> residual -> layer norm

    A decoder block built with `own_enc_attention=False` borrows the encoder
    attention layer passed to `forward`, which is how one layer is shared across
    all decoder blocks.
    """

    def __init__(
        self,
        cfg: AttentionConfig,
        ffn_width: int,
        dropout_rate: float,
        rng: np.random.Generator,
        cross_attention: bool = False,
        own_enc_attention: bool = True,
    ):
        super().__init__()
        if cfg.d_input != cfg.d_out:
            raise ConfigError(f"transformer block needs d_input == d_out, got {cfg.d_input} and {cfg.d_out}")
        self._cross = cross_attention
        self._dropout = dropout_rate
        self._rng = rng
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.self_attn_norm = LayerNorm(cfg.d_out)
        if cross_attention:
            if own_enc_attention:
                self.enc_attn = MultiHeadAttention(cfg, rng)
            self.enc_attn_norm = LayerNorm(cfg.d_out)
        self.ffn = FeedForward(cfg.d_out, ffn_width, rng)
        self.ffn_norm = LayerNorm(cfg.d_out)

    def forward(
        self,
        x: Tensor,
        self_mask: Optional[np.ndarray] = None,
        memory: Optional[Tensor] = None,
        memory_mask: Optional[np.ndarray] = None,
        shared_enc_attn: Optional[MultiHeadAttention] = None,
    ) -> Tensor:
        h = dropout(self.self_attn(x, x, self_mask), self._dropout, self.training, self._rng)
        x = self.self_attn_norm(x + h)
        if self._cross:
            attn = getattr(self, "enc_attn", None) or shared_enc_attn
            if attn is None or memory is None:
                raise ContractError("decoder block needs encoder memory and an encoder attention layer")
            h = dropout(attn(x, memory, memory_mask), self._dropout, self.training, self._rng)
            x = self.enc_attn_norm(x + h)
        h = dropout(self.ffn(x), self._dropout, self.training, self._rng)
        return self.ffn_norm(x + h)

    @staticmethod
    def num_params(cfg: AttentionConfig, ffn_width: int, cross_attention: bool = False,
                   own_enc_attention: bool = True) -> int:
        count = MultiHeadAttention.num_params(cfg) + FeedForward.num_params(cfg.d_out, ffn_width)
        count += 2 * LayerNorm.num_params(cfg.d_out)
        if cross_attention:
            count += LayerNorm.num_params(cfg.d_out)
            if own_enc_attention:
                count += MultiHeadAttention.num_params(cfg)
        return count


def _channel_norm(x: Tensor, norm: LayerNorm) -> Tensor:
    # [B, C, T, F] -> normalize over C per (t, f)
    return T.transpose(norm(T.transpose(x, (0, 2, 3, 1))), (0, 3, 1, 2))


class EncoderConvBlock(Module):
    """
    num_layers x (same-padded 2-D conv, layer norm over channels, ReLU), then a
    2-D max pool over time and frequency. Input [B, C_in, T, F] (or unbatched
    [C_in, T, F]); output [B, C_out, ceil(T/pool), ceil(F/pool)].
    """

    def __init__(self, cfg: ConvBlockConfig, in_channels: int, rng: np.random.Generator):
        super().__init__()
        self._cfg = cfg
        widths = [in_channels] + cfg.widths
        self.convs = [Conv2d(widths[i], widths[i + 1], k, rng) for i, k in enumerate(cfg.kernels)]
        self.norms = [LayerNorm(c) for c in cfg.widths]

    @property
    def pool(self) -> int:
        return self._cfg.pool or 1

    def out_length(self, length: int) -> int:
        return -(-length // self.pool)

    def forward(self, x: Tensor, lengths: Optional[np.ndarray] = None) -> Tensor:
        unbatched = x.ndim == 3
        if unbatched:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4:
            raise DimensionError(f"encoder conv block expects [B, C, T, F], got {x.shape}")
        widest = max(self._cfg.kernels)
        if x.shape[2] < widest or x.shape[3] < widest:
            raise DimensionError(f"encoder conv block input {x.shape[2:]} is smaller than kernel {widest}")
        keep = None
        if lengths is not None:
            valid = np.arange(x.shape[2])[None, :] < np.asarray(lengths)[:, None]
            keep = valid[:, None, :, None]
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(_channel_norm(conv(x), norm))
            if keep is not None:
                x = x * Tensor(np.broadcast_to(keep, x.shape).astype(x.dtype))
        if self.pool > 1:
            x = T.max_pool2d(x, self.pool)
        if unbatched:
            x = T.reshape(x, x.shape[1:])
        return x

    @staticmethod
    def num_params(cfg: ConvBlockConfig, in_channels: int) -> int:
        widths = [in_channels] + cfg.widths
        return sum(
            Conv2d.num_params(widths[i], widths[i + 1], k) + LayerNorm.num_params(widths[i + 1])
            for i, k in enumerate(cfg.kernels)
        )


class DecoderConvBlock(Module):
    """
    num_layers x (causal 1-D conv over time, layer norm, ReLU). Input [B, T, D]
    (or [T, D]); output keeps T. Output step t only sees inputs up to t.
    """

    def __init__(self, cfg: ConvBlockConfig, in_dim: int, rng: np.random.Generator):
        super().__init__()
        if cfg.pool is not None:
            raise ConfigError("decoder conv blocks take no max pooling", key="model.decoder_conv.pool")
        self._cfg = cfg
        widths = [in_dim] + cfg.widths
        self.convs = [CausalConv1d(widths[i], widths[i + 1], k, rng) for i, k in enumerate(cfg.kernels)]
        self.norms = [LayerNorm(c) for c in cfg.widths]

    @property
    def receptive_field(self) -> int:
        return receptive_field(self._cfg.kernels)

    def forward(self, e: Tensor) -> Tensor:
        unbatched = e.ndim == 2
        if unbatched:
            e = T.reshape(e, (1,) + e.shape)
        for conv, norm in zip(self.convs, self.norms):
            e = T.relu(norm(conv(e)))
        if unbatched:
            e = T.reshape(e, e.shape[1:])
        return e

    @staticmethod
    def num_params(cfg: ConvBlockConfig, in_dim: int) -> int:
        widths = [in_dim] + cfg.widths
        return sum(
            CausalConv1d.num_params(widths[i], widths[i + 1], k) + LayerNorm.num_params(widths[i + 1])
            for i, k in enumerate(cfg.kernels)
        )


def receptive_field(kernels: Sequence[int]) -> int:
    """Context size of stacked causal convolutions: 1 + sum(k - 1)."""
    if any(k < 1 for k in kernels):
        raise ConfigError(f"kernel widths must be >= 1, got {list(kernels)}")
    return 1 + sum(k - 1 for k in kernels)


def sinusoidal_embedding(steps: int, dim: int) -> np.ndarray:
    """Table [steps, dim] with sin on even and cos on odd columns."""
    if dim % 2:
        raise ConfigError(f"sinusoidal embedding needs an even width, got {dim}")
    positions = np.arange(steps, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((steps, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)
    return table.astype(T.get_dtype())
