"""
Beam and greedy search over a trained ConvTransformer.

Scores are raw summed log-probabilities: no length normalization or coverage
penalty. Candidates are ordered by (score descending, token ids ascending), so
every search is deterministic.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from .audio import AudioSource, FeatureConfig, extract_features, read_audio, read_pcm
from .checkpoint import Checkpoint
from .errors import ContractError, DimensionError, InputError
from .model import BOS_ID, EOS_ID, PAD_ID, ConvTransformer
from .tensor import Tensor, no_grad
from .text import Vocab

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    score: float
    finished: bool

    @property
    def sort_key(self) -> Tuple[float, Tuple[int, ...]]:
        return (-self.score, self.tokens)


def default_max_len(memory_mask: np.ndarray) -> int:
    """2 x encoder output length + 10."""
    return 2 * int(np.asarray(memory_mask).sum()) + 10


def _check_single(memory: Tensor, memory_mask: np.ndarray) -> None:
    if memory.ndim != 3 or memory.shape[0] != 1:
        raise DimensionError(f"search decodes one utterance at a time, memory is {memory.shape}")
    if np.asarray(memory_mask).shape != memory.shape[:2]:
        raise DimensionError(f"memory mask {np.asarray(memory_mask).shape} vs memory {memory.shape}")


def next_log_probs(model: ConvTransformer, memory: Tensor, memory_mask: np.ndarray,
                   prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    """[N, vocab] log-probabilities of the token following each (equal-length) prefix."""
    prefixes = np.asarray(prefixes, dtype=np.int64)
    n = prefixes.shape[0]
    with no_grad():
        logits = model.decode_step_logits(
            Tensor(np.repeat(memory.data, n, axis=0)),
            np.repeat(np.asarray(memory_mask), n, axis=0),
            prefixes,
        )
    return log_softmax(logits.data[:, -1, :].astype(np.float64), axis=-1)


def _expandable(vocab_size: int) -> np.ndarray:
    ids = np.arange(vocab_size)
    return ids[(ids != PAD_ID) & (ids != BOS_ID)]


def beam_search(model: ConvTransformer, memory: Tensor, memory_mask: np.ndarray, beam: int = 5,
                max_len: Optional[int] = None) -> Tuple[Hypothesis, List[Hypothesis]]:
    """
    Left-to-right beam search for one utterance. Each step expands every live
    hypothesis over all tokens except pad and BOS and keeps the top `beam`
    candidates; those ending in EOS leave the beam as finished. Returns the best
    hypothesis and the n-best list. If nothing finishes within `max_len` tokens,
    the best unfinished hypothesis is returned with finished=False.

    The search stops as soon as the best finished score is at least the best live
    score, which fixes the 1-best; the n-best list then holds only what finished
    so far and may be shorter than `beam`.
    """
    _check_single(memory, memory_mask)
    max_len = default_max_len(memory_mask) if max_len is None else max_len
    if beam < 1 or max_len < 1:
        raise ContractError(f"beam and max_len must be >= 1, got beam={beam} max_len={max_len}")
    expandable = _expandable(model.cfg.vocab_size)
    live = [Hypothesis((BOS_ID,), 0.0, False)]
    finished: List[Hypothesis] = []
    for _ in range(max_len):
        log_probs = next_log_probs(model, memory, memory_mask, [h.tokens for h in live])
        candidates = [
            Hypothesis(h.tokens + (int(tok),), h.score + float(row[tok]), int(tok) == EOS_ID)
            for h, row in zip(live, log_probs)
            for tok in expandable
        ]
        candidates.sort(key=lambda h: h.sort_key)
        kept = candidates[:beam]
        finished.extend(h for h in kept if h.finished)
        live = [h for h in kept if not h.finished]
        if not live:
            break
        # scores only decrease as tokens append
        if finished and max(h.score for h in finished) >= live[0].score:
            break
    if finished:
        nbest = sorted(finished, key=lambda h: h.sort_key)[:beam]
    else:
        nbest = sorted(live, key=lambda h: h.sort_key)[:beam]
        logger.debug("Decoder: no hypothesis reached EOS within %d tokens", max_len)
    return nbest[0], nbest


def greedy_decode(model: ConvTransformer, memory: Tensor, memory_mask: np.ndarray,
                  max_len: Optional[int] = None) -> Hypothesis:
    _check_single(memory, memory_mask)
    max_len = default_max_len(memory_mask) if max_len is None else max_len
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    expandable = _expandable(model.cfg.vocab_size)
    tokens, score = [BOS_ID], 0.0
    for _ in range(max_len):
        row = next_log_probs(model, memory, memory_mask, [tokens])[0][expandable]
        # argmax takes the lowest id among ties
        best = int(np.argmax(row))
        tokens.append(int(expandable[best]))
        score += float(row[best])
        if tokens[-1] == EOS_ID:
            break
    return Hypothesis(tuple(tokens), score, tokens[-1] == EOS_ID)


def decode_features(model: ConvTransformer, features: np.ndarray, beam: int = 5,
                    max_len: Optional[int] = None) -> Tuple[Hypothesis, List[Hypothesis]]:
    """Encode one [T, F] utterance and search it."""
    model.eval()
    features = np.asarray(features)
    with no_grad():
        memory, memory_mask = model.encode(features[None], np.array([features.shape[0]]))
    if beam == 1:
        best = greedy_decode(model, memory, memory_mask, max_len)
        return best, [best]
    return beam_search(model, memory, memory_mask, beam, max_len)


class Recognizer:
    """Model, vocab and feature settings bundled to transcribe audio."""

    def __init__(self, model: ConvTransformer, vocab: Vocab, features: Optional[FeatureConfig] = None, beam: int = 5):
        if len(vocab) != model.cfg.vocab_size:
            raise InputError(f"vocab has {len(vocab)} symbols, model expects {model.cfg.vocab_size}")
        self.model = model.eval()
        self.vocab = vocab
        self.features = features or FeatureConfig()
        self.beam = beam

    @classmethod
    def from_files(cls, checkpoint: Union[str, Path], vocab: Union[str, Path], beam: int = 5) -> "Recognizer":
        ckpt = Checkpoint.load(checkpoint)
        features = FeatureConfig.model_validate(ckpt.header["features"]) if "features" in ckpt.header else None
        logger.info("Recognizer: loaded %s (beam %d)", checkpoint, beam)
        return cls(ckpt.to_model(), Vocab.from_file(vocab), features, beam)

    def transcribe_features(self, features: np.ndarray) -> Tuple[str, Hypothesis]:
        best, _ = decode_features(self.model, features, self.beam)
        return self.vocab.decode(best.tokens), best

    def transcribe_samples(self, samples: np.ndarray, sample_rate: int) -> Tuple[str, Hypothesis]:
        return self.transcribe_features(extract_features(samples, self.features, sample_rate))

    def transcribe_audio(self, source: AudioSource, raw_pcm: bool = False) -> Tuple[str, Hypothesis]:
        if raw_pcm:
            samples, rate = read_pcm(source, self.features.sample_rate)
        else:
            samples, rate = read_audio(source)
        return self.transcribe_samples(samples, rate)


@dataclass(frozen=True)
class HypothesisRecord:
    utt_id: str
    score: float
    text: str


def write_hypotheses(path: Union[str, Path], records: Iterable[HypothesisRecord]) -> Path:
    """One `utt_id<TAB>score<TAB>text` line per utterance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(f"{rec.utt_id}\t{rec.score:.6f}\t{rec.text}\n")
    return path


def read_hypotheses(path: Union[str, Path]) -> List[HypothesisRecord]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"hypothesis file not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise InputError(f"{path}:{lineno}: expected utt_id<TAB>score<TAB>text")
        try:
            score = float(fields[1])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad score {fields[1]!r}") from exc
        records.append(HypothesisRecord(fields[0], score, fields[2]))
    return records
