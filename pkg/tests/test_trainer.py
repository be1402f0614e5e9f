import json
import math
import struct

import numpy as np
import pytest

from petdenoise.autodiff import Tensor
from petdenoise.data import PairedDataset, PhantomSpec, Volume, build_dataset, make_pair, splitmix64
from petdenoise.losses import LossWeights
from petdenoise.models import GeneratorConfig, build_generator
from petdenoise.trainer import (
    PTWG_MAGIC,
    TRANSFER_LR,
    AdamConfig,
    Checkpoint,
    CheckpointFormatError,
    TrainConfig,
    TrainLog,
    _starts,
    checkpoint_bytes,
    denoise_volume,
    generator_from_checkpoint,
    init_from_checkpoint,
    load_checkpoint,
    parse_checkpoint,
    pretrain_generator,
    save_checkpoint,
    snapshot,
    train_wgan,
    validation_batch,
    validation_mse,
)

PATCH = (9, 8, 8)


@pytest.fixture(scope="module")
def dataset():
    spec = PhantomSpec(dims=(10, 16, 16), lesion_radius=(1.0, 2.0))
    return build_dataset([make_pair(spec, s, sensitivity=5.0) for s in range(2)])


@pytest.fixture(scope="module")
def vbatch(dataset):
    return validation_batch(dataset, PATCH, count=4, seed=1)


def cfg(**kw):
    base = dict(batch_size=2, epochs=1, steps_per_epoch=3, patch_size=PATCH, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def params_equal(a: Checkpoint, b: Checkpoint) -> bool:
    return [n for n, _ in a.params] == [n for n, _ in b.params] and all(
        x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(a.params, b.params)
    )


class TestConfig:
    def test_lr_follows_init(self):
        assert cfg().adam.lr == 1e-4
        assert cfg(init="checkpoint").adam.lr == TRANSFER_LR == 1e-5
        assert cfg(init="checkpoint", adam=AdamConfig(lr=3e-4)).adam.lr == 3e-4

    @pytest.mark.parametrize(
        "kw, match",
        [({"phase": "gan"}, "phase"), ({"pretrain_loss": "l1"}, "pretrain_loss"), ({"init": "he"}, "init"),
         ({"batch_size": 0}, "batch_size"), ({"patch_size": (8, 8, 8)}, "depth"),
         ({"adam": AdamConfig(lr=0.0)}, "learning rate"), ({"d_steps_per_g_step": 0}, "d_steps")],
    )
    def test_invalid(self, kw, match):
        with pytest.raises(ValueError, match=match):
            cfg(**kw)

    @pytest.mark.parametrize("phase, init, epochs", [("pretrain", "xavier", 30), ("wgan", "xavier", 40),
                                                     ("wgan", "checkpoint", 10)])
    def test_paper_scale(self, phase, init, epochs):
        c = TrainConfig.paper_scale(phase, init)
        assert (c.batch_size, c.epochs, c.patch_size) == (80, epochs, (9, 64, 64))
        assert c.steps_per_epoch * c.batch_size <= 169_000 < (c.steps_per_epoch + 1) * c.batch_size

    def test_to_dict_is_json(self):
        d = cfg(weights=LossWeights(lambda_m=math.inf)).to_dict()
        assert json.loads(json.dumps(d))["weights"]["lambda_m"] == "inf"


class TestCheckpointFormat:
    @pytest.fixture
    def ckpt(self):
        return snapshot(build_generator(seed=2), phase="pretrain", loss="mse", epochs=3)

    def test_round_trip_bytes(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "g.ptwg")
        back = load_checkpoint(tmp_path / "g.ptwg")
        assert checkpoint_bytes(back) == checkpoint_bytes(ckpt)
        assert back.provenance == ckpt.provenance
        assert params_equal(back, ckpt)

    def test_loaded_model_bit_identical_outputs(self, ckpt, tmp_path, vbatch):
        save_checkpoint(ckpt, tmp_path / "g.ptwg")
        a = generator_from_checkpoint(ckpt)(Tensor(vbatch[0])).data
        b = generator_from_checkpoint(load_checkpoint(tmp_path / "g.ptwg"))(Tensor(vbatch[0])).data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("cut", [3, 10, 100, -1])
    def test_truncation_names_lengths(self, ckpt, cut):
        blob = checkpoint_bytes(ckpt)
        with pytest.raises(CheckpointFormatError, match=r"offset \d+: expected \d+ bytes, got \d+"):
            parse_checkpoint(blob[:cut])

    def test_bad_magic(self, ckpt):
        with pytest.raises(CheckpointFormatError, match="bad magic"):
            parse_checkpoint(b"XXXX" + checkpoint_bytes(ckpt)[4:])

    def test_future_version(self, ckpt):
        blob = checkpoint_bytes(ckpt)
        with pytest.raises(CheckpointFormatError, match="unsupported PTWG version 2"):
            parse_checkpoint(PTWG_MAGIC + struct.pack("<I", 2) + blob[8:])

    def test_trailing_bytes(self, ckpt):
        with pytest.raises(CheckpointFormatError, match="trailing"):
            parse_checkpoint(checkpoint_bytes(ckpt) + b"\0")


class TestTransfer:
    def test_mismatched_variant_rejected(self):
        ck = snapshot(build_generator(GeneratorConfig("pure2d")))
        with pytest.raises(ValueError, match="expected"):
            init_from_checkpoint(build_generator(), ck)

    def test_critic_checkpoint_rejected(self):
        ck = Checkpoint([], {"kind": "discriminator"})
        with pytest.raises(ValueError, match="discriminator"):
            generator_from_checkpoint(ck)

    def test_variant_checked_by_trainer(self, dataset):
        ck = snapshot(build_generator(GeneratorConfig("pure3d")))
        with pytest.raises(ValueError, match="variant"):
            pretrain_generator(cfg(init="checkpoint"), dataset, init_ckpt=ck)

    def test_step_zero_exact(self, dataset, vbatch):
        pre, _ = pretrain_generator(cfg(), dataset)
        expected = validation_mse(generator_from_checkpoint(pre), vbatch)
        c = cfg(phase="wgan", init="checkpoint", epochs=0)
        out, lg = train_wgan(c, dataset, g_init=pre, validation=vbatch)
        assert lg.validation[0] == (0, expected)
        assert params_equal(out, pre)


class TestPretrain:
    def test_zero_epochs_is_xavier(self, dataset):
        out, lg = pretrain_generator(cfg(epochs=0), dataset)
        fresh = snapshot(build_generator(seed=splitmix64(4, 0)))
        assert params_equal(out, fresh)
        assert lg.g_updates == 0

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            pretrain_generator(cfg(), PairedDataset([], 1.0))

    @pytest.mark.parametrize("loss", ["mse", "ssim", "perceptual"])
    def test_runs_each_loss(self, dataset, loss):
        # the SSIM window and the feature extractor need 16x16 slices
        c = cfg(pretrain_loss=loss, steps_per_epoch=2, patch_size=(9, 16, 16))
        out, lg = pretrain_generator(c, dataset)
        assert lg.g_updates == 2 and np.isfinite(lg.losses("pretrain")).all()
        assert out.provenance["loss"] == loss and out.provenance["epochs"] == 1

    def test_mse_decreases(self, dataset, vbatch):
        _, lg = pretrain_generator(cfg(steps_per_epoch=15, batch_size=4), dataset, validation=vbatch)
        assert lg.validation[-1][1] < lg.validation[0][1]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_keeps_last_finite(self, dataset):
        c = cfg(epochs=2, steps_per_epoch=2, adam=AdamConfig(lr=1e30))
        out, lg = pretrain_generator(c, dataset)
        assert lg.diverged
        assert all(np.isfinite(a).all() for _, a in out.params)

    def test_on_epoch_callback(self, dataset):
        seen = []
        pretrain_generator(cfg(epochs=2, steps_per_epoch=1), dataset, on_epoch=lambda e, ck: seen.append(e))
        assert seen == [1, 2]


class TestWGAN:
    def test_schedule(self, dataset):
        _, lg = train_wgan(cfg(phase="wgan", steps_per_epoch=2), dataset)
        kinds = [r["kind"] for r in lg.records]
        assert kinds == ["d"] * 4 + ["g"] + ["d"] * 4 + ["g"]
        assert lg.schedule_ok() and (lg.g_updates, lg.d_updates) == (2, 8)
        assert all("wasserstein" in r and "penalty" in r for r in lg.records if r["kind"] == "d")

    def test_mse_only_skips_critic(self, dataset):
        _, lg = train_wgan(cfg(phase="wgan", weights=LossWeights(lambda_m=math.inf)), dataset)
        assert lg.d_updates == 0 and lg.g_updates == 3

    def test_zero_epochs_returns_init(self, dataset):
        init = snapshot(build_generator(seed=9))
        out, lg = train_wgan(cfg(phase="wgan", init="checkpoint", epochs=0), dataset, g_init=init)
        assert params_equal(out, init) and lg.records == []

    def test_wrong_phase(self, dataset):
        with pytest.raises(ValueError, match="phase"):
            train_wgan(cfg(), dataset)

    def test_deterministic(self, dataset):
        c = cfg(phase="wgan", steps_per_epoch=1)
        a, la = train_wgan(c, dataset)
        b, lb = train_wgan(c, dataset)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)
        assert la.to_dict(timing=False) == lb.to_dict(timing=False)


def test_schedule_ok_tolerates_partial_cycle():
    lg = TrainLog()
    for _ in range(3):
        lg.add("d", 0.0)
    lg.d_updates = 3
    assert lg.schedule_ok()
    lg.g_updates = 5
    assert not lg.schedule_ok()


class TestDenoiseVolume:
    @pytest.fixture(scope="class")
    @classmethod
    def gen(cls):
        g = build_generator(seed=6)
        for name, p in g.named_parameters():
            if name.endswith("bias"):
                p.data[...] = 0.05
        return g

    def test_identity_generator(self):
        g = build_generator(seed=0)
        for p in g.parameters():
            p.data[...] = 0
        vol = Volume(np.random.default_rng(0).random((12, 10, 10)).astype(np.float32))
        np.testing.assert_allclose(denoise_volume(g, vol).data, vol.data, atol=1e-6)

    def test_depth_nine_single_window(self, gen):
        vol = Volume(np.random.default_rng(1).random((9, 12, 12)).astype(np.float32))
        direct = gen(Tensor(vol.data[None, None])).data[0, 0]
        # value equality: the accumulator turns a ReLU's -0.0 into +0.0
        np.testing.assert_array_equal(denoise_volume(gen, vol).data, direct)

    @pytest.mark.parametrize("depth, stride", [(11, 1), (13, 2), (12, 5)])
    def test_averaging_oracle(self, gen, depth, stride):
        data = np.random.default_rng(depth).random((depth, 10, 10)).astype(np.float32)
        starts = list(range(0, depth - 9 + 1, stride))
        if starts[-1] != depth - 9:
            starts.append(depth - 9)
        contributions = [[] for _ in range(depth)]
        for z0 in starts:
            out = gen(Tensor(data[None, None, z0:z0 + 9])).data[0, 0]
            for k in range(9):
                contributions[z0 + k].append(out[k].astype(np.float64))
        expected = np.stack([np.mean(c, axis=0) for c in contributions])
        if (depth, stride) == (11, 1):
            assert [len(c) for c in contributions] == [1, 2, 3, 3, 3, 3, 3, 3, 3, 2, 1]
        got = denoise_volume(gen, Volume(data), stride_z=stride).data
        np.testing.assert_allclose(got, expected, rtol=1e-6, atol=1e-7)

    def test_spatial_tiles_cover_everything(self, gen):
        vol = Volume(np.random.default_rng(2).random((9, 20, 20)).astype(np.float32))
        out = denoise_volume(gen, vol, spatial_tile=(12, 12), overlap=4)
        assert out.dims == vol.dims and np.isfinite(out.data).all()

    def test_starts_flush(self):
        assert _starts(20, 12, 8) == [0, 8]
        assert _starts(11, 9, 1) == [0, 1, 2]
        assert _starts(9, 9, 3) == [0]

    @pytest.mark.parametrize("kw, shape, match", [({}, (8, 10, 10), "depth"), ({"stride_z": 0}, (9, 10, 10), "stride"),
                                                  ({"spatial_tile": (6, 6), "overlap": 8}, (9, 20, 20), "overlap")])
    def test_rejects(self, gen, kw, shape, match):
        with pytest.raises(ValueError, match=match):
            denoise_volume(gen, Volume(np.zeros(shape, np.float32)), **kw)
