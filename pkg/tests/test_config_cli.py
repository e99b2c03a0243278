import numpy as np
import pytest
import soundfile as sf
from omegaconf import OmegaConf

from convasr.audio import load_dataset
from convasr.checkpoint import Checkpoint, list_checkpoints
from convasr.cli import EXIT_INPUT, EXIT_OK, main
from convasr.config import build_run_config, dump_run_config, load_run_config
from convasr.decode import decode_features, read_hypotheses
from convasr.errors import ConfigError
from convasr.model import preset
from convasr.text import Vocab


def _write_config(path, **values):
    OmegaConf.save(OmegaConf.create(values), path)
    return path


class TestRunConfig:
    def test_defaults(self):
        cfg = build_run_config({})
        assert cfg.model == preset("toy")
        assert cfg.optim.lr == 1.0 and cfg.optim.rho == 0.95 and cfg.optim.clip == 10.0
        assert cfg.epochs == 80 and cfg.keep_last == 30

    def test_preset_file_and_overrides_layer(self, tmp_path):
        path = _write_config(tmp_path / "run.yaml", preset="canonical", epochs=5, model={"dropout": 0.0})
        cfg = load_run_config(path, ["model.heads=8", "data.batch_size=4"])
        assert cfg.model.d_model == 1024 and cfg.model.heads == 8 and cfg.model.dropout == 0.0
        assert cfg.epochs == 5 and cfg.data.batch_size == 4

    def test_dump_then_load(self, tmp_path):
        cfg = load_run_config(None, ["preset=toy", "seed=7", "features.mel_bins=16"])
        dump_run_config(cfg, tmp_path / "cfg.yaml")
        assert load_run_config(tmp_path / "cfg.yaml") == cfg

    def test_model_overrides_apply_to_default_preset(self):
        cfg = load_run_config(None, ["model.dropout=0.0"])
        assert cfg.model == preset("toy").model_copy(update={"dropout": 0.0})

    def test_invalid_values_name_the_key(self):
        with pytest.raises(ConfigError, match="heads"):
            load_run_config(None, ["model.heads=5"])
        with pytest.raises(ConfigError) as err:
            load_run_config(None, ["epochz=3"])
        assert err.value.key == "epochz"
        with pytest.raises(ConfigError) as err:
            load_run_config(None, ["optim.rho=1.5"])
        assert err.value.key == "optim.rho"
        with pytest.raises(ConfigError):
            load_run_config(None, ["preset=giant"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "nope.yaml")


def _train_config(tmp_path, data_dir, out, **extra):
    values = {
        "preset": "toy",
        "epochs": 2,
        "seed": 3,
        "checkpoint_dir": str(out),
        "model": {"dropout": 0.0},
        "data": {"train": str(data_dir / "train.npz"), "batch_size": 2},
    }
    values.update(extra)
    return _write_config(tmp_path / f"{out.name}.yaml", **values)


class TestCommands:
    def test_pipeline(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert main(["synth", str(data), "--n-utts", "4", "--seed", "0"]) == EXIT_OK
        assert {p.name for p in data.iterdir()} == {"train.npz", "vocab.txt", "refs.txt"}

        out = tmp_path / "run"
        assert main(["train", str(_train_config(tmp_path, data, out))]) == EXIT_OK
        ckpts = list_checkpoints(out)
        assert [p.name for p in ckpts] == ["checkpoint_0001.safetensors", "checkpoint_0002.safetensors"]
        assert (out / "config.yaml").is_file()
        assert len((out / "metrics.log").read_text().splitlines()) == 2
        assert Checkpoint.load(ckpts[-1]).header["seed"] == 3

        hyp = tmp_path / "hyp.txt"
        args = ["decode", "--checkpoint", str(ckpts[-1]), "--data", str(data / "train.npz"),
                "--vocab", str(data / "vocab.txt"), "--beam", "2", "--max-len", "8", "--out", str(hyp)]
        assert main(args) == EXIT_OK
        assert [r.utt_id for r in read_hypotheses(hyp)] == [f"synth-{i:05d}" for i in range(4)]

        capsys.readouterr()
        assert main(["score", str(data / "refs.txt"), str(hyp), "--per-utt"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 5 and lines[-1].startswith("hyp.txt\tS=")

        assert main(["average", str(out), "--last-n", "2"]) == EXIT_OK
        averaged = Checkpoint.load(out / "averaged.safetensors")
        assert averaged.header["averaged_from"] == [p.name for p in ckpts]

    def test_training_is_reproducible(self, tmp_path):
        data = tmp_path / "data"
        main(["synth", str(data), "--n-utts", "4", "--seed", "1"])
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["train", str(_train_config(tmp_path, data, first))]) == EXIT_OK
        assert main(["train", str(_train_config(tmp_path, data, second))]) == EXIT_OK
        for a, b in zip(list_checkpoints(first), list_checkpoints(second)):
            assert a.read_bytes() == b.read_bytes()

    def test_zero_epochs_only_writes_config(self, tmp_path):
        out = tmp_path / "run"
        path = _write_config(tmp_path / "run.yaml", epochs=0, checkpoint_dir=str(out))
        assert main(["train", str(path)]) == EXIT_OK
        assert [p.name for p in out.iterdir()] == ["config.yaml"]

    def test_missing_training_data(self, tmp_path):
        path = _write_config(tmp_path / "run.yaml", epochs=1, checkpoint_dir=str(tmp_path / "run"))
        assert main(["train", str(path)]) == EXIT_INPUT

    def test_dataset_must_fit_model(self, tmp_path):
        data = tmp_path / "data"
        main(["synth", str(data), "--n-utts", "2"])
        path = _train_config(tmp_path, data, tmp_path / "run", model={"input_dim": 20})
        assert main(["train", str(path)]) == EXIT_INPUT

    def test_bad_override_exits_with_input_status(self, tmp_path):
        path = _write_config(tmp_path / "run.yaml", epochs=0)
        assert main(["train", str(path), "model.heads=5"]) == EXIT_INPUT

    def test_info_reports_total(self, capsys):
        assert main(["info", "--preset", "canonical"]) == EXIT_OK
        last = capsys.readouterr().out.splitlines()[-1]
        name, total = last.split()
        assert name == "total"
        assert 200_000_000 <= int(total.replace(",", "")) <= 250_000_000

    def test_identical_transcripts_score_zero(self, tmp_path, capsys):
        refs = tmp_path / "refs.txt"
        refs.write_text("u1\ta b c\nu2\td e\n")
        assert main(["score", str(refs), str(refs)]) == EXIT_OK
        assert capsys.readouterr().out.strip().endswith("WER=0.00%")

    def test_score_reports_each_set_and_the_pooled_total(self, tmp_path, capsys):
        refs = tmp_path / "refs.txt"
        refs.write_text("u1\ta b c\nu2\td e\n")
        exact = tmp_path / "exact.txt"
        exact.write_text("u1\ta b c\nu2\td e\n")
        noisy = tmp_path / "noisy.txt"
        noisy.write_text("u1\ta c\nu2\td e x\n")
        assert main(["score", str(refs), str(exact), str(noisy)]) == EXIT_OK
        assert capsys.readouterr().out.splitlines() == [
            "exact.txt\tS=0 I=0 D=0 N=5 WER=0.00%",
            "noisy.txt\tS=0 I=1 D=1 N=5 WER=40.00%",
            "all\tS=0 I=1 D=1 N=10 WER=20.00%",
        ]

    def test_average_without_checkpoints(self, tmp_path):
        assert main(["average", str(tmp_path)]) == EXIT_INPUT

    def test_extract_manifest(self, tmp_path):
        signal = 0.1 * np.random.default_rng(0).normal(size=4800)
        sf.write(tmp_path / "u1.wav", signal, 16000, subtype="PCM_16")
        Vocab(["a", "b"]).save(tmp_path / "vocab.txt")
        manifest = tmp_path / "manifest.tsv"
        manifest.write_text(f"u1\t{tmp_path / 'u1.wav'}\ta b\n\n")
        out = tmp_path / "feats.npz"
        assert main(["extract", str(manifest), str(out), "--vocab", str(tmp_path / "vocab.txt")]) == EXIT_OK
        [utt] = load_dataset(out)
        assert utt.utt_id == "u1" and utt.text == "a b"
        assert utt.features.shape == (28, 80)
        assert list(utt.token_ids) == [4, 5]

        args = ["extract", str(manifest), str(tmp_path / "narrow.npz"), "--mel-bins", "8"]
        assert main(args) == EXIT_OK
        assert load_dataset(tmp_path / "narrow.npz")[0].features.shape == (28, 8)
        assert main(["extract", str(manifest), str(out), "--mel-bins", "200"]) == EXIT_INPUT

        manifest.write_text("u1\tonly-two-fields\n")
        assert main(["extract", str(manifest), str(out)]) == EXIT_INPUT
        assert main(["extract", str(tmp_path / "missing.tsv"), str(out)]) == EXIT_INPUT

    def test_decode_matches_library_and_checks_config(self, tmp_path):
        data = tmp_path / "data"
        main(["synth", str(data), "--n-utts", "3", "--seed", "2"])
        out = tmp_path / "run"
        config = _train_config(tmp_path, data, out, epochs=1)
        assert main(["train", str(config)]) == EXIT_OK
        [ckpt_path] = list_checkpoints(out)

        hyp = tmp_path / "hyp.txt"
        base = ["decode", "--checkpoint", str(ckpt_path), "--data", str(data / "train.npz"),
                "--vocab", str(data / "vocab.txt"), "--beam", "1", "--max-len", "6"]
        assert main(base + ["--out", str(hyp)]) == EXIT_OK
        model = Checkpoint.load(ckpt_path).to_model()
        vocab = Vocab.from_file(data / "vocab.txt")
        expected = [vocab.decode(decode_features(model, u.features, beam=1, max_len=6)[0].tokens)
                    for u in load_dataset(data / "train.npz")]
        assert [r.text for r in read_hypotheses(hyp)] == expected

        mismatched = base + ["--out", str(tmp_path / "x.txt"), "--config", str(config), "model.ffn_width=7"]
        assert main(mismatched) == EXIT_INPUT
