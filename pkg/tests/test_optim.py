import json

import numpy as np
import pytest
from numpy.testing import assert_allclose
from safetensors.numpy import save_file

from convasr.checkpoint import Checkpoint, checkpoint_path, list_checkpoints
from convasr.errors import CheckpointError, ContractError, DimensionError, InputError, NumericAbort
from convasr.model import BOS_ID, EOS_ID, Batch, ConvTransformer
from convasr.optim import (
    AdaDeltaState,
    CheckpointSet,
    OptimConfig,
    adadelta_step,
    average_checkpoints,
    clip_gradients,
    evaluate_loss,
    global_norm,
    train,
    train_epoch,
)


def _utterance_batches(rng, sizes=((9, 3), (7, 2), (12, 4), (8, 1)), batch_size=2):
    out = []
    for start in range(0, len(sizes), batch_size):
        chunk = sizes[start:start + batch_size]
        feats = [rng.normal(size=(frames, 8)) for frames, _ in chunk]
        targets = [[BOS_ID] + list(rng.integers(4, 7, size=tokens)) + [EOS_ID] for _, tokens in chunk]
        out.append(Batch.collate(feats, targets))
    return out


class TestAdaDelta:
    def test_scalar_updates_match_hand_computation(self):
        rho, eps = 0.95, 1e-6
        state = AdaDeltaState({"x": ()}, rho=rho, eps=eps)
        x, eg, edx = 1.0, 0.0, 0.0
        params = {"x": np.array(x)}
        for g in [0.5, -0.2, 0.9, 0.0, -3.0]:
            eg = rho * eg + (1 - rho) * g * g
            dx = -np.sqrt(edx + eps) / np.sqrt(eg + eps) * g
            edx = rho * edx + (1 - rho) * dx * dx
            x = x + dx
            params = adadelta_step(params, {"x": np.array(g)}, state)
            assert float(params["x"]) == pytest.approx(x, abs=1e-12)
        assert state.steps == 5
        assert float(state.sq_grad["x"]) == pytest.approx(eg, abs=1e-12)
        assert float(state.sq_delta["x"]) == pytest.approx(edx, abs=1e-12)

    def test_learning_rate_is_read_only(self):
        state = AdaDeltaState({"x": (2,)})
        assert state.lr == 1.0
        with pytest.raises(AttributeError):
            state.lr = 0.5

    def test_shape_mismatch_names_parameter(self):
        state = AdaDeltaState({"w": (2, 2)})
        with pytest.raises(DimensionError, match="'w'"):
            adadelta_step({"w": np.zeros((2, 2))}, {"w": np.zeros(4)}, state)
        with pytest.raises(DimensionError, match="'v'"):
            adadelta_step({"v": np.zeros(2)}, {"v": np.zeros(2)}, state)

    def test_zero_gradient_leaves_parameters(self):
        state = AdaDeltaState({"w": (3,)})
        state.sq_grad["w"][:] = 0.5
        state.sq_delta["w"][:] = 0.2
        out = adadelta_step({"w": np.ones(3)}, {"w": np.zeros(3)}, state)
        assert_allclose(out["w"], 1.0)
        assert_allclose(state.sq_grad["w"], 0.95 * 0.5, rtol=1e-12)
        assert_allclose(state.sq_delta["w"], 0.95 * 0.2, rtol=1e-12)

    def test_failed_step_leaves_state_untouched(self):
        state = AdaDeltaState({"a": (2,), "b": (2,)})
        params = {"a": np.ones(2), "b": np.ones(2)}
        with pytest.raises(DimensionError, match="'b'"):
            adadelta_step(params, {"a": np.ones(2), "b": np.ones(3)}, state)
        assert not state.sq_grad["a"].any() and not state.sq_delta["a"].any()
        assert state.steps == 0

    def test_state_for_model(self, make_config):
        model = ConvTransformer(make_config())
        state = AdaDeltaState.for_model(model, OptimConfig())
        assert set(state.sq_grad) == {name for name, _ in model.named_parameters()}
        assert state.constants() == {"optimizer": "adadelta", "lr": 1.0, "rho": 0.95, "eps": 1e-6}


class TestClipping:
    def test_large_norm_is_scaled_to_threshold(self):
        grads = {"a": np.array([15.0, 20.0]), "b": np.zeros(3)}
        clipped, norm = clip_gradients(grads, 10.0)
        assert norm == pytest.approx(25.0)
        assert global_norm(clipped) == pytest.approx(10.0, abs=1e-9)
        assert_allclose(clipped["a"], [6.0, 8.0])

    def test_small_norm_is_untouched(self):
        grads = [np.array([3.0]), np.array([4.0])]
        clipped, norm = clip_gradients(grads, 10.0)
        assert clipped is grads and norm == pytest.approx(5.0)

    def test_threshold_must_be_positive(self):
        with pytest.raises(ContractError):
            clip_gradients([np.ones(2)], 0.0)


class TestTrainEpoch:
    def test_empty_epoch(self, make_config):
        model = ConvTransformer(make_config())
        stats, ckpt = train_epoch(model, [], AdaDeltaState.for_model(model, OptimConfig()), epoch=3)
        assert ckpt is None
        assert stats.epoch == 3 and stats.batches == 0 and stats.tokens == 0

    def test_statistics_and_checkpoint(self, make_config, rng):
        model = ConvTransformer(make_config())
        data = _utterance_batches(rng)
        stats, ckpt = train_epoch(model, data, AdaDeltaState.for_model(model, OptimConfig()), epoch=1)
        assert stats.batches == 2
        assert stats.tokens == sum(b.num_tokens for b in data)
        assert 0.0 <= stats.token_accuracy <= 1.0
        assert stats.grad_norm_p50 <= stats.grad_norm_p90 <= stats.grad_norm_max
        assert ckpt.header["epoch"] == 1 and ckpt.header["optimizer"] == "adadelta"
        assert set(ckpt.params) == set(model.state_dict())
        assert stats.log_line().startswith("epoch=1 batches=2 ")

    def test_non_finite_loss_aborts(self, make_config, rng):
        model = ConvTransformer(make_config())
        model.output_proj.bias.data[0] = np.nan
        with pytest.raises(NumericAbort) as err:
            train_epoch(model, _utterance_batches(rng), AdaDeltaState.for_model(model, OptimConfig()))
        assert err.value.batch_index == 0

    def test_full_batch_loss_decreases(self, make_config, rng):
        model = ConvTransformer(make_config(), seed=2)
        data = _utterance_batches(rng, batch_size=4)
        state = AdaDeltaState.for_model(model, OptimConfig())
        losses = [train_epoch(model, data, state, epoch=e)[0].mean_loss for e in range(1, 6)]
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert evaluate_loss(model, data) < losses[0]

    def test_train_writes_checkpoints_and_metrics(self, make_config, rng, tmp_path):
        model = ConvTransformer(make_config())
        data = _utterance_batches(rng)
        state = AdaDeltaState.for_model(model, OptimConfig())
        history = train(model, lambda epoch: data, state, 4, tmp_path, keep_last=2, header={"seed": 0})
        assert len(history) == 4
        assert state.steps == 8 and state.lr == 1.0
        assert Checkpoint.load(checkpoint_path(tmp_path, 4)).header["lr"] == 1.0
        assert [p.name for p in list_checkpoints(tmp_path)] == [
            "checkpoint_0003.safetensors", "checkpoint_0004.safetensors"]
        lines = (tmp_path / "metrics.log").read_text().splitlines()
        assert [line.split()[0] for line in lines] == ["epoch=1", "epoch=2", "epoch=3", "epoch=4"]
        assert Checkpoint.load(checkpoint_path(tmp_path, 4)).header["seed"] == 0


def _ckpt(**params):
    return Checkpoint(params={name: np.asarray(value, dtype=np.float32) for name, value in params.items()},
                      header={"epoch": 1})


class TestAveraging:
    def test_identical_checkpoints_average_to_themselves(self, rng):
        w = rng.normal(size=(3, 4)).astype(np.float32)
        out = average_checkpoints([_ckpt(w=w), _ckpt(w=w), _ckpt(w=w)])
        assert np.array_equal(out.params["w"], w)

    def test_mean_of_two(self):
        out = average_checkpoints([_ckpt(w=[1.0, 2.0], b=[0.0]), _ckpt(w=[3.0, 6.0], b=[1.0])])
        assert_allclose(out.params["w"], [2.0, 4.0])
        assert_allclose(out.params["b"], [0.5])
        assert "epoch" not in out.header and out.header["averaged_from"] == ["0", "1"]

    def test_mismatches_name_the_parameter(self):
        with pytest.raises(CheckpointError, match="'b'"):
            average_checkpoints([_ckpt(w=[1.0], b=[1.0]), _ckpt(w=[1.0])])
        with pytest.raises(CheckpointError, match="'w'"):
            average_checkpoints([_ckpt(w=[1.0]), _ckpt(w=[1.0, 2.0])])
        with pytest.raises(InputError):
            average_checkpoints([])

    def test_from_directory_takes_newest(self, tmp_path):
        for epoch in range(1, 6):
            _ckpt(w=[float(epoch)]).save(checkpoint_path(tmp_path, epoch))
        ckpt_set = CheckpointSet.from_directory(tmp_path, last_n=2)
        assert ckpt_set.sources == ["checkpoint_0004.safetensors", "checkpoint_0005.safetensors"]
        assert_allclose(average_checkpoints(ckpt_set).params["w"], [4.5])
        with pytest.raises(InputError):
            CheckpointSet.from_directory(tmp_path / "empty")


class TestCheckpointFile:
    def test_rewrite_is_byte_identical(self, make_config, tmp_path):
        ckpt = Checkpoint.from_model(ConvTransformer(make_config()), epoch=7)
        first = ckpt.save(tmp_path / "a.safetensors")
        second = Checkpoint.load(first).save(tmp_path / "b.safetensors")
        assert first.read_bytes() == second.read_bytes()

    def test_restored_model_matches(self, make_config, rng):
        model = ConvTransformer(make_config(), seed=5).eval()
        restored = Checkpoint.from_model(model).to_model()
        batch = _utterance_batches(rng)[0]
        assert_allclose(restored(batch).data, model(batch).data, atol=1e-6)

    def test_header_is_sorted_json(self, tmp_path):
        path = Checkpoint(params={"w": np.zeros(2)}, header={"zeta": 1, "alpha": 2}).save(tmp_path / "c.safetensors")
        loaded = Checkpoint.load(path)
        assert loaded.header == {"alpha": 2, "format_version": 1, "zeta": 1}
        assert loaded.params["w"].dtype == np.float32

    def test_list_checkpoints_sorts_by_epoch(self, tmp_path):
        for epoch in (10, 2, 1):
            _ckpt(w=[0.0]).save(checkpoint_path(tmp_path, epoch))
        (tmp_path / "notes.txt").write_text("x")
        assert [p.name for p in list_checkpoints(tmp_path)] == [
            "checkpoint_0001.safetensors", "checkpoint_0002.safetensors", "checkpoint_0010.safetensors"]

    def test_load_errors(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "missing.safetensors")
        junk = tmp_path / "junk.safetensors"
        junk.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            Checkpoint.load(junk)
        bare = tmp_path / "bare.safetensors"
        save_file({"w": np.zeros(2, dtype=np.float32)}, str(bare))
        with pytest.raises(CheckpointError, match="header"):
            Checkpoint.load(bare)
        future = tmp_path / "future.safetensors"
        save_file({"w": np.zeros(2, dtype=np.float32)}, str(future),
                  metadata={"convasr": json.dumps({"format_version": 2})})
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.load(future)
        wide = tmp_path / "wide.safetensors"
        save_file({"w": np.zeros(2, dtype=np.float64)}, str(wide),
                  metadata={"convasr": json.dumps({"format_version": 1})})
        with pytest.raises(CheckpointError, match="'w'"):
            Checkpoint.load(wide)

    def test_header_without_config(self):
        with pytest.raises(CheckpointError):
            _ckpt(w=[0.0]).model_config
