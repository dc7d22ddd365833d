import numpy as np
import pytest

from pconvnet.errors import (BadMagicError, ConfigError, ConfigMismatchError, ContractError,
                             DimensionError, FormatError, NumericalError, TruncatedFileError,
                             VersionMismatchError)
from pconvnet.imageproc import synthesize_blobs, synthesize_masks, synthesize_textures
from pconvnet.losses import combine_terms, l_total
from pconvnet.model import ModelConfig, build_model, inpaint_forward
from pconvnet.tensor import Tape, Tensor, square, tsum
from pconvnet.trainer import (AdamState, PairedDataset, TrainConfig, adam_step,
                              apply_checkpoint, decode_checkpoint, encode_checkpoint,
                              load_checkpoint, model_from_checkpoint, parse_config_text,
                              save_checkpoint, train_inpaint, train_segment)

SMALL = ModelConfig(depth=2, base_channels=4, seed=3)


@pytest.fixture(scope="module")
def texture_data():
    imgs = synthesize_textures(4, 16, 8)
    masks = np.stack(synthesize_masks(5, 16, 16, 8))
    return PairedDataset(imgs, masks)


@pytest.fixture(scope="module")
def short_run(texture_data):
    cfg = TrainConfig(batch_size=2, max_iters=6, seed=11)
    return train_inpaint(texture_data, SMALL, cfg), cfg


class TestAdam:
    def test_zero_gradient_is_identity(self):
        p = {"w": Tensor([1.0, -2.0])}
        state = AdamState.zeros_like(p)
        for _ in range(5):
            adam_step(p, {"w": np.zeros(2)}, state, 1e-2)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
        assert state.t == 5

    def test_first_step_closed_form(self):
        g, lr, eps = 0.3, 2e-4, 1e-8
        p = {"w": Tensor([0.5], dtype=np.float64)}
        state = AdamState.zeros_like(p)
        adam_step(p, {"w": np.array([g])}, state, lr)
        # m_hat = g and v_hat = g^2 after one step
        assert p["w"].data[0] == pytest.approx(0.5 - lr * g / (abs(g) + eps), rel=1e-12)

    def test_descends_on_parabola(self):
        x = {"x": Tensor([1.0], requires_grad=True)}
        state = AdamState.zeros_like(x)
        values = [1.0]
        for _ in range(100):
            with Tape() as tape:
                loss = tsum(square(x["x"]))
            adam_step(x, {"x": tape.backward(loss)[x["x"]]}, state, 2e-4)
            values.append(abs(float(x["x"].data[0])))
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_nan_gradient_names_parameter(self):
        p = {"enc1.weight": Tensor([1.0])}
        with pytest.raises(NumericalError, match="enc1.weight"):
            adam_step(p, {"enc1.weight": np.array([np.nan])}, AdamState.zeros_like(p), 1e-3)


class TestTrainConfig:
    def test_learning_rate_schedule(self):
        cfg = TrainConfig(max_iters=10)
        assert [cfg.lr_at(i) for i in (0, 4, 5, 9)] == [2e-4, 2e-4, 5e-5, 5e-5]
        assert TrainConfig(max_iters=10, finetune_start_iter=2).lr_at(2) == 5e-5

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)

    def test_parse_config_text(self):
        assert parse_config_text("a = 1  # note\n\n# skip\nb=x\n") == {"a": "1", "b": "x"}
        with pytest.raises(ConfigError):
            parse_config_text("just words\n")


class TestDataset:
    def test_empty(self):
        with pytest.raises(ContractError):
            PairedDataset(np.zeros((0, 4, 4)), np.zeros((0, 4, 4)))

    def test_size_mismatch(self):
        with pytest.raises(DimensionError):
            PairedDataset(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))


class TestTraining:
    def test_history_records_breakdown(self, short_run):
        result, cfg = short_run
        assert len(result.history) == 6
        rec = result.history[0]
        assert rec["lr"] == cfg.lr_initial and result.history[-1]["lr"] == cfg.lr_finetune
        for rec in result.history:
            recomposed = combine_terms(rec, cfg.loss_weights())
            assert abs(rec["total"] - recomposed) <= np.spacing(np.float32(recomposed))

    def test_recorded_loss_recomputes(self, texture_data):
        cfg = TrainConfig(batch_size=2, max_iters=1, seed=2)
        result = train_inpaint(texture_data, SMALL, cfg)
        rng = np.random.Generator(np.random.PCG64(2))
        idx = np.minimum((rng.random(2) * len(texture_data)).astype(np.int64), 7)
        model = build_model(SMALL)
        img, m = texture_data.images[idx], texture_data.targets[idx]
        out, _ = inpaint_forward(model, img * m, m, train=True, update_stats=False)
        total, _ = l_total(out, img, m)
        assert float(total.data) == result.history[0]["total"]

    def test_runs_are_reproducible(self, texture_data, short_run):
        again = train_inpaint(texture_data, SMALL, short_run[1])
        assert again.history == short_run[0].history

    def test_zero_iterations_returns_initial_model(self, texture_data):
        result = train_inpaint(texture_data, SMALL, TrainConfig(max_iters=0))
        fresh = build_model(SMALL)
        for k, p in fresh.params.items():
            np.testing.assert_array_equal(result.checkpoint.tensors[k], p.data)
        assert result.checkpoint.iteration == 0

    def test_segment_bce_decreases(self):
        imgs, labels = synthesize_blobs(1, 16, 6)
        ds = PairedDataset(imgs, labels)
        cfg = TrainConfig(batch_size=2, max_iters=20, lr_initial=2e-3, lr_finetune=5e-4)
        res = train_segment(ds, ModelConfig(variant="seg_unet", depth=2, base_channels=4), cfg)
        first = np.mean([r["bce"] for r in res.history[:5]])
        last = np.mean([r["bce"] for r in res.history[-5:]])
        assert last < first

    def test_freeze_encoder_bn_keeps_running_stats(self, texture_data):
        cfg = TrainConfig(batch_size=2, max_iters=4, finetune_start_iter=2,
                          freeze_encoder_bn_on_finetune=True)
        half = train_inpaint(texture_data, SMALL, cfg, stop_after=2)
        full = train_inpaint(texture_data, SMALL, cfg)
        key = "enc2.bn.running_mean"
        np.testing.assert_array_equal(half.checkpoint.tensors[key], full.checkpoint.tensors[key])
        assert not np.array_equal(half.checkpoint.tensors["dec2.bn.running_mean"],
                                  full.checkpoint.tensors["dec2.bn.running_mean"])

    def test_resume_matches_uninterrupted(self, texture_data):
        cfg = TrainConfig(batch_size=2, max_iters=8, seed=4)
        full = train_inpaint(texture_data, SMALL, cfg)
        part = train_inpaint(texture_data, SMALL, cfg, stop_after=3)
        ckpt = decode_checkpoint(encode_checkpoint(part.checkpoint))
        rest = train_inpaint(texture_data, SMALL, cfg, resume=ckpt)
        assert part.history + rest.history == full.history
        assert encode_checkpoint(rest.checkpoint) == encode_checkpoint(full.checkpoint)


class TestCheckpoint:
    def test_byte_round_trip(self, short_run, tmp_path):
        buf = encode_checkpoint(short_run[0].checkpoint)
        save_checkpoint(tmp_path / "c.pcv", short_run[0].checkpoint)
        assert encode_checkpoint(load_checkpoint(tmp_path / "c.pcv")) == buf

    def test_forward_survives_round_trip(self, short_run, rng):
        result = short_run[0]
        img = rng.random((1, 1, 16, 16)).astype(np.float32)
        mask = np.ones((1, 1, 16, 16), np.float32)
        mask[:, :, 3:8, 3:8] = 0
        before, _ = inpaint_forward(result.model, img, mask)
        model = model_from_checkpoint(decode_checkpoint(encode_checkpoint(result.checkpoint)))
        after, _ = inpaint_forward(model, img, mask)
        np.testing.assert_array_equal(before.data, after.data)

    def test_bad_magic(self, short_run):
        buf = bytearray(encode_checkpoint(short_run[0].checkpoint))
        buf[0] ^= 0xFF
        with pytest.raises(BadMagicError):
            decode_checkpoint(bytes(buf))

    def test_version(self, short_run):
        buf = bytearray(encode_checkpoint(short_run[0].checkpoint))
        buf[4] = 7
        with pytest.raises(VersionMismatchError):
            decode_checkpoint(bytes(buf))

    def test_truncated(self, short_run):
        buf = encode_checkpoint(short_run[0].checkpoint)
        with pytest.raises(TruncatedFileError):
            decode_checkpoint(buf[:-5])

    def test_trailing_bytes(self, short_run):
        buf = encode_checkpoint(short_run[0].checkpoint)
        with pytest.raises(FormatError):
            decode_checkpoint(buf + b"\0")

    def test_depth_mismatch(self, short_run):
        deeper = build_model(ModelConfig(depth=3, base_channels=4))
        with pytest.raises(ConfigMismatchError, match="depth"):
            apply_checkpoint(deeper, short_run[0].checkpoint)
