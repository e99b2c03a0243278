"""
Log-mel filterbank features, audio readers, feature datasets and a synthetic
desk-scale task whose utterances are sequences of per-token spectral templates.
"""

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import librosa
import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field, model_validator
from scipy.signal import get_window

from .errors import ConfigError, InputError
from .model import BOS_ID, EOS_ID, Batch
from .text import Vocab

logger = logging.getLogger(__name__)

AudioSource = Union[str, Path, bytes, io.IOBase]


class FeatureConfig(BaseModel):
    sample_rate: int = Field(default=16000, ge=1)
    window_ms: float = Field(default=25.0, gt=0)
    hop_ms: float = Field(default=10.0, gt=0)
    mel_bins: int = Field(default=80, ge=1)
    fft_size: int = Field(default=512, ge=2)
    log_floor: float = Field(default=1e-10, gt=0)
    fmin: float = Field(default=0.0, ge=0)
    fmax: Optional[float] = None
    normalize: bool = True

    @property
    def window_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def upper_frequency(self) -> float:
        return self.fmax if self.fmax is not None else self.sample_rate / 2.0

    @model_validator(mode="after")
    def _check_geometry(self) -> "FeatureConfig":
        if self.window_length < self.hop_length:
            raise ValueError("window must be at least as long as the hop")
        if self.hop_length < 1:
            raise ValueError("hop is shorter than one sample")
        if self.fft_size < self.window_length:
            raise ValueError(f"fft_size {self.fft_size} < window of {self.window_length} samples")
        if not self.fmin < self.upper_frequency <= self.sample_rate / 2.0:
            raise ValueError("need fmin < fmax <= sample_rate / 2")
        if (mel_filterbank(self).sum(axis=1) <= 0).any():
            raise ValueError("some mel filters cover no FFT bin; lower mel_bins or raise fft_size")
        return self


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """[mel_bins, fft_size // 2 + 1] HTK-scale triangles with unit peak."""
    return librosa.filters.mel(
        sr=cfg.sample_rate, n_fft=cfg.fft_size, n_mels=cfg.mel_bins,
        fmin=cfg.fmin, fmax=cfg.upper_frequency, htk=True, norm=None, dtype=np.float64,
    )


def mel_center_frequencies(cfg: FeatureConfig) -> np.ndarray:
    return librosa.mel_frequencies(n_mels=cfg.mel_bins + 2, fmin=cfg.fmin, fmax=cfg.upper_frequency, htk=True)[1:-1]


def logmel(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """[T, mel_bins] log mel energies, T = 1 + (len - window) // hop."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise InputError(f"expected mono samples, got shape {samples.shape}")
    win, hop = cfg.window_length, cfg.hop_length
    if samples.shape[0] < win:
        raise InputError(f"signal of {samples.shape[0]} samples is shorter than one {win}-sample window")
    frames = sliding_window_view(samples, win)[::hop]
    window = get_window("hann", win, fftbins=True)
    power = np.abs(np.fft.rfft(frames * window, n=cfg.fft_size, axis=-1)) ** 2
    energies = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor))


def normalize_features(features: np.ndarray) -> np.ndarray:
    """Per-utterance zero mean, unit variance per bin; constant bins become 0."""
    mean = features.mean(axis=0, keepdims=True)
    std = features.std(axis=0, keepdims=True)
    return (features - mean) / np.where(std > 0, std, 1.0)


def extract_features(samples: np.ndarray, cfg: FeatureConfig, sample_rate: Optional[int] = None) -> np.ndarray:
    if sample_rate is not None and sample_rate != cfg.sample_rate:
        raise InputError(f"audio is {sample_rate} Hz, features expect {cfg.sample_rate} Hz")
    features = logmel(samples, cfg)
    return normalize_features(features) if cfg.normalize else features


def _as_file(source: AudioSource):
    if isinstance(source, (bytes, bytearray)):
        return io.BytesIO(source)
    if isinstance(source, (str, Path)):
        if not Path(source).is_file():
            raise InputError(f"audio file not found: {source}")
        return str(source)
    return source


def read_pcm(source: AudioSource, sample_rate: int = 16000) -> Tuple[np.ndarray, int]:
    """Headerless mono 16-bit little-endian PCM."""
    try:
        samples, _ = sf.read(_as_file(source), samplerate=sample_rate, channels=1, format="RAW",
                             subtype="PCM_16", endian="LITTLE", dtype="float64")
    except RuntimeError as exc:
        raise InputError(f"unreadable PCM audio: {exc}") from exc
    return samples.reshape(-1), sample_rate


def read_audio(source: AudioSource) -> Tuple[np.ndarray, int]:
    """Any container soundfile understands (WAV, FLAC, ...); must be mono."""
    try:
        samples, rate = sf.read(_as_file(source), dtype="float64", always_2d=True)
    except RuntimeError as exc:
        raise InputError(f"unreadable audio: {exc}") from exc
    if samples.shape[1] != 1:
        raise InputError(f"expected mono audio, got {samples.shape[1]} channels")
    return samples[:, 0], rate


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    token_ids: np.ndarray
    text: str

    @property
    def target(self) -> List[int]:
        return [BOS_ID] + [int(t) for t in self.token_ids] + [EOS_ID]


def save_dataset(path: Union[str, Path], utterances: List[Utterance]) -> Path:
    """npz archive: ids, concatenated features and tokens with offsets, texts."""
    if not utterances:
        raise InputError("refusing to write an empty dataset")
    widths = {u.features.shape[1] for u in utterances}
    if len(widths) != 1:
        raise InputError(f"utterances disagree on feature width: {sorted(widths)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(
            f,
            utt_ids=np.array([u.utt_id for u in utterances]),
            features=np.concatenate([u.features for u in utterances]),
            feature_offsets=np.cumsum([0] + [u.features.shape[0] for u in utterances]),
            tokens=np.concatenate([np.asarray(u.token_ids, dtype=np.int64) for u in utterances]),
            token_offsets=np.cumsum([0] + [len(u.token_ids) for u in utterances]),
            texts=np.array([u.text for u in utterances]),
        )
    return path


def load_dataset(path: Union[str, Path]) -> List[Utterance]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"dataset not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {key: data[key] for key in data.files}
    except (OSError, ValueError) as exc:
        raise InputError(f"unreadable dataset {path}: {exc}") from exc
    missing = {"utt_ids", "features", "feature_offsets", "tokens", "token_offsets", "texts"} - set(arrays)
    if missing:
        raise InputError(f"dataset {path} lacks {sorted(missing)}")
    fo, to = arrays["feature_offsets"], arrays["token_offsets"]
    return [
        Utterance(
            utt_id=str(utt),
            features=arrays["features"][fo[i]:fo[i + 1]],
            token_ids=arrays["tokens"][to[i]:to[i + 1]],
            text=str(arrays["texts"][i]),
        )
        for i, utt in enumerate(arrays["utt_ids"])
    ]


def batches(utterances: List[Utterance], batch_size: int, rng: Optional[np.random.Generator] = None) -> List[Batch]:
    """Collate utterances into padded batches, shuffling the order when `rng` is given."""
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(utterances))
    if rng is not None:
        order = rng.permutation(order)
    out = []
    for start in range(0, len(order), batch_size):
        chunk = [utterances[i] for i in order[start:start + batch_size]]
        out.append(Batch.collate([u.features for u in chunk], [u.target for u in chunk]))
    return out


# ---------------------------------------------------------------------------
# Synthetic task
# ---------------------------------------------------------------------------


class SyntheticTask(BaseModel):
    alphabet: List[str] = Field(default_factory=lambda: list("abcdefgh"))
    feature_dim: int = Field(default=16, ge=1)
    frames_per_token: int = Field(default=4, ge=1)
    noise: float = Field(default=0.1, ge=0.0)
    min_tokens: int = Field(default=2, ge=1)
    max_tokens: int = Field(default=6, ge=1)
    template_seed: int = 1234
    min_distance: float = Field(default=1.0, ge=0.0)

    @model_validator(mode="after")
    def _check(self) -> "SyntheticTask":
        if len(set(self.alphabet)) != len(self.alphabet) or not self.alphabet:
            raise ValueError("alphabet must be non-empty and duplicate-free")
        if self.max_tokens < self.min_tokens:
            raise ValueError("max_tokens < min_tokens")
        return self

    def vocab(self) -> Vocab:
        return Vocab(self.alphabet)

    def templates(self) -> np.ndarray:
        """[len(alphabet), frames_per_token, feature_dim]; pairwise distances >= min_distance."""
        rng = np.random.default_rng(self.template_seed)
        n = len(self.alphabet)
        for _ in range(100):
            tpl = rng.standard_normal((n, self.frames_per_token, self.feature_dim))
            flat = tpl.reshape(n, -1)
            dist = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
            if n == 1 or dist[~np.eye(n, dtype=bool)].min() >= self.min_distance:
                return tpl
        raise ConfigError(f"could not draw templates at distance >= {self.min_distance}", key="task.min_distance")


def make_synthetic(task: SyntheticTask, n_utts: int, seed: int = 0) -> List[Utterance]:
    if n_utts < 1:
        raise InputError(f"n_utts must be >= 1, got {n_utts}")
    templates = task.templates()
    vocab = task.vocab()
    rng = np.random.default_rng(seed)
    utterances = []
    for i in range(n_utts):
        count = int(rng.integers(task.min_tokens, task.max_tokens + 1))
        picks = rng.integers(0, len(task.alphabet), size=count)
        features = np.concatenate([templates[p] for p in picks])
        if task.noise > 0:
            features = features + task.noise * rng.standard_normal(features.shape)
        text = " ".join(task.alphabet[p] for p in picks)
        utterances.append(Utterance(
            utt_id=f"synth-{i:05d}",
            features=features,
            token_ids=np.array(vocab.encode(text)[1:-1], dtype=np.int64),
            text=text,
        ))
    logger.info("Synthetic: generated %d utterances over %d symbols", n_utts, len(task.alphabet))
    return utterances
