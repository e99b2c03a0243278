"""
Vocabulary, tokenization and word error rate scoring.

Vocab files hold one unit per line (anything after the first whitespace, such as a
subword score column, is ignored). An optional first line `# boundary: <marker>`
declares the word-boundary prefix used by subword unit lists; without it every
unit is a whole word.
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from .errors import ContractError, InputError
from .model import BOS_ID, EOS_ID, NUM_RESERVED, PAD_ID, UNK_ID

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
BOUNDARY_HEADER = "# boundary:"


class Vocab:
    def __init__(self, units: Sequence[str], boundary: Optional[str] = None):
        symbols = list(RESERVED)
        index = {s: i for i, s in enumerate(symbols)}
        for unit in units:
            if unit in index:
                raise InputError(f"vocab: symbol '{unit}' is duplicated or collides with a reserved symbol")
            index[unit] = len(symbols)
            symbols.append(unit)
        if boundary is not None and not boundary:
            raise InputError("vocab: empty boundary marker")
        self._symbols = symbols
        self._index = index
        self.boundary = boundary
        self._longest = max((len(u) for u in units), default=1)

    def __len__(self) -> int:
        return len(self._symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    @property
    def units(self) -> List[str]:
        return self._symbols[NUM_RESERVED:]

    def id_of(self, symbol: str) -> int:
        return self._index.get(symbol, UNK_ID)

    def symbol(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._symbols):
            raise InputError(f"token id {token_id} outside [0, {len(self._symbols)})")
        return self._symbols[token_id]

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "Vocab":
        """
        One unit per line; only the first whitespace field is read, so SentencePiece
        `.vocab` files (unit<TAB>score) load as-is. Lines naming a reserved symbol
        (`<pad>`, `<s>`, `</s>`, `<unk>`) are skipped since those ids are fixed at 0-3,
        so such a file yields fewer units than lines.
        """
        path = Path(path)
        if not path.is_file():
            raise InputError(f"vocab file not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        boundary = None
        if lines and lines[0].startswith(BOUNDARY_HEADER):
            boundary = lines[0][len(BOUNDARY_HEADER):].strip()
            lines = lines[1:]
        units = [line.split()[0] for line in lines if line.strip()]
        dropped = [u for u in units if u in RESERVED]
        if dropped:
            logger.info("Vocab: skipped reserved symbol(s) %s in %s", " ".join(dropped), path)
        units = [u for u in units if u not in RESERVED]
        logger.info("Vocab: loaded %d units from %s", len(units), path)
        return cls(units, boundary=boundary)

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Vocab":
        """Word-level vocab of every distinct whitespace token, sorted."""
        return cls(sorted({word for text in texts for word in text.split()}))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = [f"{BOUNDARY_HEADER} {self.boundary}"] if self.boundary else []
        path.write_text("\n".join(header + self.units) + "\n", encoding="utf-8")
        return path

    def segment(self, word: str) -> List[str]:
        """Greedy longest-match split of one word into units; unmatched characters become <unk>."""
        if self.boundary is None:
            return [word if word in self._index else UNK]
        text = self.boundary + word
        pieces, pos = [], 0
        while pos < len(text):
            for end in range(min(len(text), pos + self._longest), pos, -1):
                if text[pos:end] in self._index and text[pos:end] not in RESERVED:
                    pieces.append(text[pos:end])
                    pos = end
                    break
            else:
                pieces.append(UNK)
                pos += 1
        return pieces

    def encode(self, text: str) -> List[int]:
        units = [u for word in text.split() for u in self.segment(word)]
        return [BOS_ID] + [self.id_of(u) for u in units] + [EOS_ID]

    def decode(self, ids: Sequence[int]) -> str:
        """Inverse of encode. Leading BOS, one EOS and any trailing pad are stripped."""
        ids = [int(i) for i in ids]
        for i in ids:
            self.symbol(i)
        if ids and ids[0] == BOS_ID:
            ids = ids[1:]
        if EOS_ID in ids:
            end = ids.index(EOS_ID)
            if any(i != PAD_ID for i in ids[end + 1:]):
                raise InputError("decode: tokens after EOS")
            ids = ids[:end]
        if any(i in (PAD_ID, BOS_ID) for i in ids):
            raise InputError("decode: pad or BOS inside the sequence")
        return " ".join(words_from_units([self._symbols[i] for i in ids], self.boundary))


def words_from_units(units: Sequence[str], boundary: Optional[str] = None) -> List[str]:
    """Join subword units into words at boundary markers."""
    if boundary is None:
        return list(units)
    return "".join(units).replace(boundary, " ").split()


class WerResult(BaseModel):
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        if self.ref_words == 0:
            raise ContractError("WER is undefined for an empty reference")
        return self.errors / self.ref_words

    def __add__(self, other: "WerResult") -> "WerResult":
        return WerResult(
            substitutions=self.substitutions + other.substitutions,
            insertions=self.insertions + other.insertions,
            deletions=self.deletions + other.deletions,
            ref_words=self.ref_words + other.ref_words,
        )

    def summary(self) -> str:
        return (
            f"S={self.substitutions} I={self.insertions} D={self.deletions} "
            f"N={self.ref_words} WER={self.rate * 100:.2f}%"
        )


def _words(seq: Union[str, Sequence[str]]) -> List[str]:
    return seq.split() if isinstance(seq, str) else list(seq)


def align(ref: Union[str, Sequence[str]], hyp: Union[str, Sequence[str]]) -> WerResult:
    """Minimum-edit alignment counts; an empty reference is allowed here."""
    ref, hyp = _words(ref), _words(hyp)
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i, j] = min(
                cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                cost[i - 1, j] + 1,
                cost[i, j - 1] + 1,
            )
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerResult(substitutions=int(subs), insertions=ins, deletions=dels, ref_words=n)


def wer(ref: Union[str, Sequence[str]], hyp: Union[str, Sequence[str]]) -> WerResult:
    if not _words(ref):
        raise ContractError("WER is undefined for an empty reference")
    return align(ref, hyp)


def corpus_wer(pairs: Iterable[Tuple[Union[str, Sequence[str]], Union[str, Sequence[str]]]]) -> WerResult:
    """S/I/D summed over utterances; the rate is errors over all reference words."""
    total = WerResult()
    for ref, hyp in pairs:
        total = total + align(ref, hyp)
    if total.ref_words == 0:
        raise ContractError("WER is undefined for an empty reference corpus")
    return total


def read_transcripts(path: Union[str, Path]) -> Dict[str, str]:
    """utt_id -> text from `utt_id<TAB>...<TAB>text` lines (reference or hypothesis files)."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"transcript file not found: {path}")
    out: Dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 2:
            raise InputError(f"{path}:{lineno}: expected utt_id<TAB>text")
        out[fields[0]] = fields[-1]
    return out


def write_transcripts(path: Union[str, Path], texts: Dict[str, str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{utt}\t{text}\n" for utt, text in texts.items()), encoding="utf-8")
    return path
