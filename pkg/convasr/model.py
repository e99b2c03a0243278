"""
Encoder-decoder transformer with convolutional context.

Encoder: 2-D conv blocks over (time, frequency) -> flatten channels x frequency
-> linear projection to d_model -> transformer blocks with full, padding-aware
self-attention. Decoder: token embedding -> causal 1-D conv blocks -> transformer
blocks with future-masked self-attention and encoder attention -> vocab logits.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, InputError
from .layers import (
    AttentionConfig,
    CausalConv1d,
    ConvBlockConfig,
    DecoderConvBlock,
    Embedding,
    EncoderConvBlock,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerBlock,
    sinusoidal_embedding,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
NUM_RESERVED = 4


class ModelConfig(BaseModel):
    input_dim: int = Field(default=80, ge=1)
    in_channels: int = Field(default=1, ge=1)
    encoder_conv_blocks: List[ConvBlockConfig]
    decoder_conv: ConvBlockConfig
    enc_layers: int = Field(ge=0)
    dec_layers: int = Field(ge=0)
    d_model: int = Field(ge=1)
    heads: int = Field(ge=1)
    ffn_width: int = Field(ge=1)
    vocab_size: int = Field(ge=NUM_RESERVED + 1)
    emb_dim: int = Field(ge=1)
    dropout: float = Field(default=0.15, ge=0.0, lt=1.0)
    positional_mode: Literal["conv", "sinusoidal", "both"] = "conv"
    enc_attention_mode: Literal["per_block", "single"] = "per_block"

    @model_validator(mode="after")
    def _check_widths(self) -> "ModelConfig":
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.decoder_conv.pool is not None:
            raise ValueError("decoder conv block takes no max pooling")
        if self.uses_decoder_conv and self.decoder_conv.widths[-1] != self.d_model:
            raise ValueError(
                f"last decoder conv width {self.decoder_conv.widths[-1]} must equal d_model={self.d_model}"
            )
        if self.positional_mode == "sinusoidal" and self.emb_dim % 2:
            raise ValueError(f"sinusoidal mode needs an even emb_dim, got {self.emb_dim}")
        if self.positional_mode != "conv" and self.d_model % 2:
            raise ValueError(f"sinusoidal tables need an even d_model, got {self.d_model}")
        if self.input_dim < self.min_frames:
            raise ValueError(f"input_dim={self.input_dim} is too narrow for the encoder conv blocks")
        return self

    @property
    def min_frames(self) -> int:
        """Shortest extent (time or frequency) every encoder conv block can take."""
        need = 1
        for block in reversed(self.encoder_conv_blocks):
            need = max(max(block.kernels), (need - 1) * (block.pool or 1) + 1)
        return need

    @property
    def uses_decoder_conv(self) -> bool:
        return self.positional_mode in ("conv", "both")

    @property
    def uses_sinusoidal(self) -> bool:
        return self.positional_mode in ("sinusoidal", "both")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig.for_width(self.d_model, self.heads)

    @property
    def total_pool(self) -> int:
        stride = 1
        for block in self.encoder_conv_blocks:
            stride *= block.pool or 1
        return stride

    @property
    def reduced_freq(self) -> int:
        freq = self.input_dim
        for block in self.encoder_conv_blocks:
            freq = -(-freq // (block.pool or 1))
        return freq

    @property
    def flatten_width(self) -> int:
        channels = self.encoder_conv_blocks[-1].widths[-1] if self.encoder_conv_blocks else self.in_channels
        return channels * self.reduced_freq


@dataclass
class Batch:
    """Zero-padded features [B, T, F] and targets [B, U] (BOS ... EOS, then pad)."""

    features: np.ndarray
    feature_lengths: np.ndarray
    targets: np.ndarray
    target_lengths: np.ndarray

    def __post_init__(self):
        self.feature_lengths = np.asarray(self.feature_lengths, dtype=np.int64)
        self.target_lengths = np.asarray(self.target_lengths, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        b = self.features.shape[0]
        if self.feature_lengths.shape != (b,) or self.target_lengths.shape != (b,) or self.targets.shape[0] != b:
            raise DimensionError("batch: features, targets and length vectors disagree on batch size")
        if (self.feature_lengths > self.features.shape[1]).any() or (self.target_lengths > self.targets.shape[1]).any():
            raise InputError("batch: a length exceeds the padded extent")
        if (self.target_lengths < 2).any():
            raise InputError("batch: every target needs at least BOS and EOS")
        rows = np.arange(b)
        if (self.targets[:, 0] != BOS_ID).any() or (self.targets[rows, self.target_lengths - 1] != EOS_ID).any():
            raise InputError("batch: targets must start with BOS and end with EOS")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def frame_mask(self) -> np.ndarray:
        return np.arange(self.features.shape[1])[None, :] < self.feature_lengths[:, None]

    @property
    def num_tokens(self) -> int:
        return int((self.target_lengths - 1).sum())

    @classmethod
    def collate(cls, features: Sequence[np.ndarray], targets: Sequence[Sequence[int]]) -> "Batch":
        if not features:
            raise InputError("cannot collate an empty batch")
        frames = max(f.shape[0] for f in features)
        steps = max(len(t) for t in targets)
        padded = np.zeros((len(features), frames, features[0].shape[1]), dtype=np.float64)
        tokens = np.full((len(targets), steps), PAD_ID, dtype=np.int64)
        for i, (feat, tgt) in enumerate(zip(features, targets)):
            padded[i, : feat.shape[0]] = feat
            tokens[i, : len(tgt)] = tgt
        return cls(
            features=padded,
            feature_lengths=np.array([f.shape[0] for f in features]),
            targets=tokens,
            target_lengths=np.array([len(t) for t in targets]),
        )


def causal_mask(steps: int) -> np.ndarray:
    """[steps, steps] attend-mask: position t sees positions <= t."""
    return np.tril(np.ones((steps, steps), dtype=bool))


class ConvTransformer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self._rng = rng
        att = cfg.attention

        channels = cfg.in_channels
        self.encoder_conv = []
        for block in cfg.encoder_conv_blocks:
            self.encoder_conv.append(EncoderConvBlock(block, channels, rng))
            channels = block.widths[-1]
        self.encoder_proj = Linear(cfg.flatten_width, cfg.d_model, rng)
        self.encoder_layers = [TransformerBlock(att, cfg.ffn_width, cfg.dropout, rng) for _ in range(cfg.enc_layers)]

        self.embedding = Embedding(cfg.vocab_size, cfg.emb_dim, rng)
        if cfg.uses_decoder_conv:
            self.decoder_conv = DecoderConvBlock(cfg.decoder_conv, cfg.emb_dim, rng)
        else:
            self.decoder_input_proj = Linear(cfg.emb_dim, cfg.d_model, rng)
        per_block = cfg.enc_attention_mode == "per_block"
        if not per_block and cfg.dec_layers > 0:
            self.shared_enc_attn = MultiHeadAttention(att, rng)
        self.decoder_layers = [
            TransformerBlock(att, cfg.ffn_width, cfg.dropout, rng, cross_attention=True, own_enc_attention=per_block)
            for _ in range(cfg.dec_layers)
        ]
        self.output_proj = Linear(cfg.d_model, cfg.vocab_size, rng)
        logger.debug("ConvTransformer: built with %d parameters", self.num_parameters())

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    def component_sizes(self) -> Dict[str, int]:
        sizes: Dict[str, int] = {}
        for name, param in self.named_parameters():
            component = name.split(".", 1)[0]
            sizes[component] = sizes.get(component, 0) + param.data.size
        return sizes

    def encoder_frontend(self, features: np.ndarray, lengths: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        """Conv blocks, flatten and projection (plus sinusoidal table when enabled).

        Returns the frame sequence [B, T', d_model] and the valid lengths after pooling.
        """
        features = np.asarray(features)
        lengths = np.asarray(lengths, dtype=np.int64)
        if features.ndim != 3:
            raise DimensionError(f"features must be [B, T, F], got {features.shape}")
        if features.shape[2] != self._cfg.input_dim:
            raise DimensionError(f"feature width {features.shape[2]} != configured input_dim {self._cfg.input_dim}")
        if lengths.shape != (features.shape[0],):
            raise DimensionError(f"lengths {lengths.shape} do not match batch of {features.shape[0]}")
        if features.shape[1] == 0 or (lengths < 1).any():
            raise InputError("empty utterance")
        if (lengths > features.shape[1]).any():
            raise InputError("a feature length exceeds the padded extent")

        valid = np.arange(features.shape[1])[None, :] < lengths[:, None]
        x = Tensor((features * valid[:, :, None])[:, None, :, :])
        for block in self.encoder_conv:
            x = block(x, lengths)
            lengths = -(-lengths // block.pool)
        b, c, t, f = x.shape
        x = T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, c * f))
        x = self.encoder_proj(x)
        if self._cfg.uses_sinusoidal:
            x = x + Tensor(sinusoidal_embedding(t, self._cfg.d_model))
        return x, lengths

    def encode(self, features: np.ndarray, lengths: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        """Returns memory [B, T', d_model] and the boolean memory mask [B, T']."""
        x, lengths = self.encoder_frontend(features, lengths)
        b, t, _ = x.shape
        memory_mask = np.arange(t)[None, :] < lengths[:, None]
        self_mask = np.broadcast_to(memory_mask[:, None, :], (b, t, t))
        for layer in self.encoder_layers:
            x = layer(x, self_mask)
        return x, memory_mask

    def decode_step_logits(self, memory: Tensor, memory_mask: np.ndarray, prefix_tokens: np.ndarray) -> Tensor:
        """Logits [B, U, vocab] for every prefix position; position u sees tokens <= u."""
        prefix = np.asarray(prefix_tokens, dtype=np.int64)
        if prefix.ndim != 2 or prefix.shape[1] == 0:
            raise DimensionError(f"prefix tokens must be [B, U] with U >= 1, got {prefix.shape}")
        if (prefix < 0).any() or (prefix >= self._cfg.vocab_size).any():
            raise InputError(f"token id outside [0, {self._cfg.vocab_size})")
        if (prefix[:, 0] != BOS_ID).any():
            raise ContractError("decoder prefixes must start with BOS")
        steps = prefix.shape[1]

        y = self.embedding(prefix)
        if self._cfg.uses_decoder_conv:
            y = self.decoder_conv(y)
            if self._cfg.uses_sinusoidal:
                y = y + Tensor(sinusoidal_embedding(steps, self._cfg.d_model))
        else:
            y = y + Tensor(sinusoidal_embedding(steps, self._cfg.emb_dim))
            y = self.decoder_input_proj(y)

        self_mask = causal_mask(steps)
        cross_mask = np.broadcast_to(np.asarray(memory_mask)[:, None, :], (prefix.shape[0], steps, memory.shape[1]))
        shared = getattr(self, "shared_enc_attn", None)
        for layer in self.decoder_layers:
            y = layer(y, self_mask, memory, cross_mask, shared)
        return self.output_proj(y)

    def forward(self, batch: Batch) -> Tensor:
        """Teacher-forced logits for targets[:, 1:] given targets[:, :-1]."""
        memory, memory_mask = self.encode(batch.features, batch.feature_lengths)
        return self.decode_step_logits(memory, memory_mask, batch.targets[:, :-1])

    def loss(self, batch: Batch) -> Tuple[Tensor, Tensor]:
        logits = self.forward(batch)
        return sequence_nll(logits, batch.targets[:, 1:], batch.target_lengths - 1), logits


def sequence_nll(logits: Tensor, targets: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Mean token negative log-likelihood over the first `lengths[b]` positions of each row."""
    targets = np.asarray(targets, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if logits.ndim != 3 or logits.shape[:2] != targets.shape or lengths.shape != (targets.shape[0],):
        raise DimensionError(f"loss: logits {logits.shape}, targets {targets.shape}, lengths {lengths.shape} disagree")
    valid = np.arange(targets.shape[1])[None, :] < lengths[:, None]
    count = int(valid.sum())
    if count == 0:
        raise ContractError("loss: every target position is padding")
    picked = T.gather(T.log_softmax(logits, axis=-1), targets)
    return T.scale((picked * Tensor(valid)).sum(), -1.0 / count)


def token_accuracy(logits: np.ndarray, targets: np.ndarray, lengths: np.ndarray) -> float:
    valid = np.arange(targets.shape[1])[None, :] < np.asarray(lengths)[:, None]
    hits = (np.argmax(logits, axis=-1) == targets) & valid
    return float(hits.sum()) / max(int(valid.sum()), 1)


class ParamCount(BaseModel):
    total: int
    components: Dict[str, int]


def count_params(cfg: ModelConfig) -> ParamCount:
    """Exact scalar parameter count per component, without allocating the model."""
    att = cfg.attention
    components: Dict[str, int] = {}
    channels = cfg.in_channels
    enc_conv = 0
    for block in cfg.encoder_conv_blocks:
        enc_conv += EncoderConvBlock.num_params(block, channels)
        channels = block.widths[-1]
    if enc_conv:
        components["encoder_conv"] = enc_conv
    components["encoder_proj"] = Linear.num_params(cfg.flatten_width, cfg.d_model)
    if cfg.enc_layers:
        components["encoder_layers"] = cfg.enc_layers * TransformerBlock.num_params(att, cfg.ffn_width)
    components["embedding"] = Embedding.num_params(cfg.vocab_size, cfg.emb_dim)
    if cfg.uses_decoder_conv:
        components["decoder_conv"] = DecoderConvBlock.num_params(cfg.decoder_conv, cfg.emb_dim)
    else:
        components["decoder_input_proj"] = Linear.num_params(cfg.emb_dim, cfg.d_model)
    per_block = cfg.enc_attention_mode == "per_block"
    if not per_block and cfg.dec_layers:
        components["shared_enc_attn"] = MultiHeadAttention.num_params(att)
    if cfg.dec_layers:
        components["decoder_layers"] = cfg.dec_layers * TransformerBlock.num_params(
            att, cfg.ffn_width, cross_attention=True, own_enc_attention=per_block
        )
    components["output_proj"] = Linear.num_params(cfg.d_model, cfg.vocab_size)
    return ParamCount(total=sum(components.values()), components=components)


# ---------------------------------------------------------------------------
# Presets, ablations and sweeps
# ---------------------------------------------------------------------------


def _canonical() -> ModelConfig:
    return ModelConfig(
        input_dim=80,
        encoder_conv_blocks=[
            ConvBlockConfig(num_layers=2, kernel=3, channels=64, pool=2),
            ConvBlockConfig(num_layers=2, kernel=3, channels=128, pool=2),
        ],
        decoder_conv=ConvBlockConfig(num_layers=3, kernel=3, channels=1024),
        enc_layers=10,
        dec_layers=10,
        d_model=1024,
        heads=16,
        ffn_width=2048,
        vocab_size=5000 + NUM_RESERVED,
        emb_dim=512,
        dropout=0.15,
    )


def _toy() -> ModelConfig:
    return ModelConfig(
        input_dim=16,
        encoder_conv_blocks=[
            ConvBlockConfig(num_layers=1, kernel=3, channels=4, pool=2),
            ConvBlockConfig(num_layers=1, kernel=3, channels=8, pool=2),
        ],
        decoder_conv=ConvBlockConfig(num_layers=2, kernel=3, channels=32),
        enc_layers=2,
        dec_layers=2,
        d_model=32,
        heads=4,
        ffn_width=64,
        vocab_size=8 + NUM_RESERVED,
        emb_dim=16,
        dropout=0.1,
    )


PRESETS = ("canonical", "best", "toy")


def preset(name: str) -> ModelConfig:
    if name == "canonical":
        return _canonical()
    if name == "best":
        return _canonical().model_copy(update={"ffn_width": 4096, "enc_layers": 16, "dec_layers": 6})
    if name == "toy":
        return _toy()
    raise ConfigError(f"unknown preset '{name}', expected one of {PRESETS}", key="preset")


ABLATIONS = ("conv_context", "sinusoidal", "conv_and_sinusoidal", "single_enc_attention", "heads_32", "ffn_4k")


def ablation(base: ModelConfig, name: str) -> ModelConfig:
    """Variants of a base config compared in the modeling-decision study."""
    updates = {
        "conv_context": {},
        "sinusoidal": {"positional_mode": "sinusoidal"},
        "conv_and_sinusoidal": {"positional_mode": "both"},
        "single_enc_attention": {"enc_attention_mode": "single"},
        "heads_32": {"heads": 32},
        "ffn_4k": {"ffn_width": 4096},
    }
    if name not in updates:
        raise ConfigError(f"unknown ablation '{name}', expected one of {ABLATIONS}", key="ablation")
    return ModelConfig.model_validate({**base.model_dump(), **updates[name]})


DEPTH_GRIDS: Dict[str, List[Tuple[int, int]]] = {
    "same_depth": [(6, 6), (8, 8), (10, 10), (12, 12), (14, 14)],
    "same_total": [(2, 10), (4, 8), (6, 6), (8, 4), (10, 2)],
    "same_encoder": [(10, 2), (10, 4), (10, 6), (10, 8), (10, 10)],
    "same_decoder": [(2, 10), (4, 10), (6, 10), (8, 10), (10, 10)],
}


def depth_sweep(base: ModelConfig, pairs: Sequence[Tuple[int, int]]) -> List[ModelConfig]:
    return [base.model_copy(update={"enc_layers": enc, "dec_layers": dec}) for enc, dec in pairs]


DECODER_CONTEXT_KERNELS: List[List[int]] = [
    [3], [5], [7], [9], [11],
    [3, 3], [3, 5], [5, 5], [5, 7],
    [3, 3, 3], [3, 3, 5], [3, 5, 5],
    [3, 3, 3, 3], [3, 3, 3, 5],
]


def _decoder_conv_params(kernels: Sequence[int], hidden: int, in_dim: int, d_model: int) -> int:
    widths = [in_dim] + [hidden] * (len(kernels) - 1) + [d_model]
    return sum(
        CausalConv1d.num_params(widths[i], widths[i + 1], k) + LayerNorm.num_params(widths[i + 1])
        for i, k in enumerate(kernels)
    )


def decoder_context_sweep(
    base: ModelConfig, kernel_lists: Sequence[Sequence[int]] = DECODER_CONTEXT_KERNELS
) -> List[ModelConfig]:
    """
    One config per kernel list. Intermediate decoder conv widths are picked so the
    decoder conv parameter count is as close as possible to the base config's.
    """
    budget = DecoderConvBlock.num_params(base.decoder_conv, base.emb_dim)
    configs = []
    for kernels in kernel_lists:
        hidden = base.d_model
        if len(kernels) > 1:
            hidden = min(
                range(1, 8 * base.d_model + 1),
                key=lambda h: abs(_decoder_conv_params(kernels, h, base.emb_dim, base.d_model) - budget),
            )
        widths = [hidden] * (len(kernels) - 1) + [base.d_model]
        block = ConvBlockConfig(num_layers=len(kernels), kernel=list(kernels), channels=widths)
        configs.append(base.model_copy(update={"decoder_conv": block}))
    return configs
