import itertools
from types import SimpleNamespace

import numpy as np
import pytest

from convasr.audio import FeatureConfig
from convasr.decode import (
    Hypothesis,
    HypothesisRecord,
    Recognizer,
    beam_search,
    decode_features,
    default_max_len,
    greedy_decode,
    next_log_probs,
    read_hypotheses,
    write_hypotheses,
)
from convasr.errors import ContractError, DimensionError, InputError
from convasr.model import BOS_ID, EOS_ID, ConvTransformer
from convasr.tensor import Tensor, no_grad
from convasr.text import Vocab


class ForcedModel:
    """Puts a large logit on `sequence[u]` after a prefix of length u + 1."""

    def __init__(self, sequence, vocab_size=6, margin=10.0):
        self.cfg = SimpleNamespace(vocab_size=vocab_size)
        self.sequence = list(sequence)
        self.margin = margin

    def decode_step_logits(self, memory, memory_mask, prefix):
        prefix = np.asarray(prefix)
        logits = np.zeros(prefix.shape + (self.cfg.vocab_size,))
        for u in range(prefix.shape[1]):
            logits[:, u, self.sequence[min(u, len(self.sequence) - 1)]] = self.margin
        return Tensor(logits)


def _memory(frames=4):
    return Tensor(np.zeros((1, frames, 2))), np.ones((1, frames), dtype=bool)


def _encoded(model, rng, frames=9):
    with no_grad():
        return model.encode(rng.normal(size=(1, frames, 8)), np.array([frames]))


class TestForcedSearch:
    def test_early_stop_can_leave_a_short_nbest(self):
        best, nbest = beam_search(ForcedModel([EOS_ID]), *_memory(), beam=5)
        assert best.tokens == (BOS_ID, EOS_ID) and best.finished
        assert nbest == [best]

    @pytest.mark.parametrize("beam", [1, 3, 5])
    def test_recovers_forced_sequence(self, beam):
        model = ForcedModel([4, 5, 3, EOS_ID])
        best, nbest = beam_search(model, *_memory(), beam=beam)
        assert best.tokens == (BOS_ID, 4, 5, 3, EOS_ID)
        assert best.finished
        assert len(nbest) <= beam
        assert [h.sort_key for h in nbest] == sorted(h.sort_key for h in nbest)

    def test_greedy_recovers_forced_sequence(self):
        best = greedy_decode(ForcedModel([5, 5, EOS_ID]), *_memory())
        assert best.tokens == (BOS_ID, 5, 5, EOS_ID) and best.finished

    def test_unfinished_search_is_flagged(self):
        model = ForcedModel([4])
        best, _ = beam_search(model, *_memory(), beam=1, max_len=5)
        assert not best.finished and len(best.tokens) == 6
        assert not greedy_decode(model, *_memory(), max_len=5).finished

    def test_pad_and_bos_are_never_emitted(self):
        best, nbest = beam_search(ForcedModel([BOS_ID, 0, EOS_ID]), *_memory(), beam=4, max_len=4)
        for hyp in nbest:
            assert BOS_ID not in hyp.tokens[1:] and 0 not in hyp.tokens

    def test_ties_break_toward_lower_ids(self):
        model = ForcedModel([EOS_ID], margin=0.0)
        best, _ = beam_search(model, *_memory(), beam=3)
        assert best.tokens == (BOS_ID, EOS_ID)
        assert greedy_decode(model, *_memory()).tokens == (BOS_ID, EOS_ID)

    def test_default_length_budget(self):
        assert default_max_len(np.ones((1, 7), dtype=bool)) == 24

    def test_contracts(self):
        model = ForcedModel([EOS_ID])
        with pytest.raises(ContractError):
            beam_search(model, *_memory(), beam=0)
        with pytest.raises(DimensionError):
            beam_search(model, Tensor(np.zeros((2, 3, 2))), np.ones((2, 3), dtype=bool))


class TestModelSearch:
    def test_wide_beam_finds_exhaustive_optimum(self, double, make_config, rng):
        model = ConvTransformer(make_config(vocab_size=6), seed=3).eval()
        memory, mask = _encoded(model, rng)
        tokens = [t for t in range(6) if t not in (0, BOS_ID)]
        best_score, best_tokens = -np.inf, None
        for length in range(1, 4):
            for body in itertools.product([t for t in tokens if t != EOS_ID], repeat=length - 1):
                seq = (BOS_ID,) + body + (EOS_ID,)
                score = sum(next_log_probs(model, memory, mask, [seq[:i]])[0][seq[i]] for i in range(1, len(seq)))
                if score > best_score:
                    best_score, best_tokens = score, seq
        best, _ = beam_search(model, memory, mask, beam=64, max_len=3)
        assert best.finished
        assert best.tokens == best_tokens
        assert best.score == pytest.approx(best_score, abs=1e-8)
        for beam in (1, 2, 3, 5):
            narrow, _ = beam_search(model, memory, mask, beam=beam, max_len=3)
            if narrow.finished:
                assert narrow.score <= best_score + 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_beam_of_one_is_greedy(self, make_config, seed):
        rng = np.random.default_rng(seed)
        model = ConvTransformer(make_config(), seed=seed).eval()
        memory, mask = _encoded(model, rng)
        beam_best, _ = beam_search(model, memory, mask, beam=1)
        greedy = greedy_decode(model, memory, mask)
        assert beam_best.tokens == greedy.tokens
        assert beam_best.score == pytest.approx(greedy.score, abs=1e-12)

    def test_decoding_is_deterministic(self, make_config, rng):
        model = ConvTransformer(make_config(), seed=1)
        features = rng.normal(size=(11, 8))
        first = decode_features(model, features, beam=4)
        second = decode_features(model, features, beam=4)
        assert first == second
        assert decode_features(model, features, beam=1)[0] == greedy_decode(model, *_encoded_features(model, features))


def _encoded_features(model, features):
    with no_grad():
        return model.encode(features[None], np.array([features.shape[0]]))


class TestRecognizer:
    def test_vocab_size_must_match(self, make_config):
        with pytest.raises(InputError):
            Recognizer(ConvTransformer(make_config()), Vocab(["a", "b"]))

    def test_transcribes_samples(self, make_config, rng):
        recognizer = Recognizer(ConvTransformer(make_config()), Vocab(["a", "b", "c"]),
                                FeatureConfig(mel_bins=8), beam=2)
        text, best = recognizer.transcribe_samples(rng.normal(size=4800) * 0.1, 16000)
        assert isinstance(text, str) and isinstance(best, Hypothesis)
        with pytest.raises(InputError):
            recognizer.transcribe_samples(np.zeros(4800), 8000)

    def test_from_files(self, make_config, tmp_path):
        from convasr.checkpoint import Checkpoint

        model = ConvTransformer(make_config())
        path = Checkpoint.from_model(model, features=FeatureConfig(mel_bins=8).model_dump()).save(tmp_path / "m.safetensors")
        Vocab(["a", "b", "c"]).save(tmp_path / "vocab.txt")
        recognizer = Recognizer.from_files(path, tmp_path / "vocab.txt", beam=3)
        assert recognizer.features.mel_bins == 8 and recognizer.beam == 3
        assert not recognizer.model.training


class TestHypothesisFiles:
    def test_write_and_read(self, tmp_path):
        records = [HypothesisRecord("u1", -1.25, "a b"), HypothesisRecord("u2", -0.5, "")]
        loaded = read_hypotheses(write_hypotheses(tmp_path / "hyp.txt", records))
        assert loaded == records
        assert (tmp_path / "hyp.txt").read_text().splitlines()[0] == "u1\t-1.250000\ta b"

    def test_malformed_lines(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("u1\tnot-a-number\ta\n")
        with pytest.raises(InputError):
            read_hypotheses(path)
        path.write_text("u1 only\n")
        with pytest.raises(InputError):
            read_hypotheses(path)
