import dataclasses

import numpy as np
import pytest
import torch

from espaint.data import SyntheticScenes
from espaint.errors import CheckpointError, DataError, ParameterError
from espaint.imaging import one_hot
from espaint.losses import FeaturePyramid, l1_loss, perceptual_loss
from espaint.masks import center_mask
from espaint.networks import (
    AutoencoderConfig,
    DiscriminatorConfig,
    ESPAAutoencoder,
    SemanticDecoder,
    SemanticDecoderConfig,
    TinySegmenter,
)
from espaint.training import (
    TrainConfig,
    load_checkpoint,
    load_into,
    lr_at,
    save_checkpoint,
    train_joint,
    train_segmenter,
    train_stage1,
    train_stage2,
)


def tiny_config(tmp_path, phase="stage1", iters=30, size=16, seed=0):
    return TrainConfig(
        phase=phase,
        out_dir=str(tmp_path / f"run_{phase}"),
        image_size=size,
        plateau_iters=iters // 2,
        total_iters=iters,
        seed=seed,
        checkpoint_every=0,
        autoencoder=AutoencoderConfig(
            image_size=size, base_channels=4, bottleneck_channels=8,
            dilation_rates=(2,), espa_d_k=2, espa_d_v=2,
        ),
        decoder=SemanticDecoderConfig(num_classes=4, bottleneck_channels=8, block_widths=(8, 8)),
        discriminator=DiscriminatorConfig(base_channels=4),
    )


def read_log(path):
    import csv

    with open(path) as fh:
        return list(csv.reader(fh))


class TestSchedule:
    def test_paper_anchor_points(self):
        cfg = TrainConfig(lr=2e-4, plateau_iters=500_000, total_iters=1_000_000)
        assert lr_at(500_000, cfg) == 0.0002
        assert lr_at(1_000_000, cfg) == 0.0
        assert lr_at(750_000, cfg) == pytest.approx(0.0001, rel=1e-12)

    def test_piecewise_linear_non_increasing(self):
        cfg = TrainConfig(lr=1e-3, plateau_iters=100, total_iters=400)
        values = [lr_at(i, cfg) for i in range(0, 401, 10)]
        assert values[0] == 1e-3 and values[-1] == 0.0
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_range_rejected(self):
        cfg = TrainConfig(total_iters=100)
        with pytest.raises(ParameterError):
            lr_at(101, cfg)
        with pytest.raises(ParameterError):
            lr_at(-1, cfg)


class TestConfig:
    def test_json_round_trip(self):
        cfg = TrainConfig(phase="stage2", image_size=32, seed=9,
                          autoencoder=AutoencoderConfig(dilation_rates=(2, 4)))
        again = TrainConfig.from_json(cfg.to_json())
        assert dataclasses.asdict(again.validate()) == dataclasses.asdict(cfg.validate())

    def test_unknown_keys_rejected(self):
        with pytest.raises(ParameterError):
            TrainConfig.from_json('{"learning_rate": 0.1}')
        with pytest.raises(ParameterError):
            TrainConfig.from_json('{"autoencoder": {"bogus": 1}}')

    def test_validation(self):
        with pytest.raises(ParameterError):
            TrainConfig(phase="stage7").validate()
        with pytest.raises(ParameterError):
            TrainConfig(batch_size=0).validate()
        with pytest.raises(ParameterError):
            TrainConfig(plateau_iters=10, total_iters=5).validate()


class TestCheckpoints:
    def test_round_trip_elementwise(self, tmp_path):
        torch.manual_seed(0)
        model = ESPAAutoencoder(tiny_config(tmp_path).autoencoder)
        ckpt = {
            "format_version": 1,
            "phase": "stage1",
            "iteration": 5,
            "config": {},
            "models": {"autoencoder": model.state_dict()},
            "optimizers": {},
        }
        save_checkpoint(ckpt, tmp_path / "c.pt")
        loaded = load_checkpoint(tmp_path / "c.pt")
        for key, tensor in model.state_dict().items():
            assert torch.equal(loaded["models"]["autoencoder"][key], tensor)

    def test_forward_identical_after_reload(self, tmp_path):
        torch.manual_seed(1)
        cfg = tiny_config(tmp_path)
        model = ESPAAutoencoder(cfg.autoencoder)
        img = torch.rand(1, 3, 16, 16)
        mask = (torch.rand(1, 1, 16, 16) > 0.5).float()
        with torch.no_grad():
            before, _ = model(img, mask)
        save_checkpoint({"format_version": 1, "models": {"m": model.state_dict()}},
                        tmp_path / "c.pt")
        model2 = ESPAAutoencoder(cfg.autoencoder)
        load_into(model2, load_checkpoint(tmp_path / "c.pt")["models"]["m"], "m")
        with torch.no_grad():
            after, _ = model2(img, mask)
        assert torch.equal(before, after)

    def test_truncated_file_rejected(self, tmp_path):
        save_checkpoint({"format_version": 1, "models": {}}, tmp_path / "c.pt")
        data = (tmp_path / "c.pt").read_bytes()
        (tmp_path / "broken.pt").write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "broken.pt")

    def test_version_skew_rejected(self, tmp_path):
        torch.save({"format_version": 999}, tmp_path / "c.pt")
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "c.pt")

    def test_shape_mismatch_names_first_key(self, tmp_path):
        torch.manual_seed(2)
        cfg_small = tiny_config(tmp_path).autoencoder
        small = ESPAAutoencoder(cfg_small)
        big_cfg = AutoencoderConfig(**{**cfg_small.__dict__, "base_channels": 8})
        big = ESPAAutoencoder(big_cfg)
        with pytest.raises(CheckpointError) as err:
            load_into(big, small.state_dict(), "autoencoder")
        message = str(err.value)
        assert "shape mismatch at key" in message
        first_bad = sorted(
            k for k, v in small.state_dict().items()
            if tuple(v.shape) != tuple(big.state_dict()[k].shape)
        )[0]
        assert first_bad in message


class TestStage1:
    def test_descent_and_determinism(self, tmp_path):
        ds = SyntheticScenes(4, 16, seed=5)
        cfg = tiny_config(tmp_path, iters=150)
        train_stage1(cfg, ds)
        rows = [r for r in read_log(tmp_path / "run_stage1" / "loss_log.csv")
                if r[1] == "stage1_total"]
        values = [float(r[2]) for r in rows]
        assert np.mean(values[-30:]) < np.mean(values[:30])

        cfg2 = tiny_config(tmp_path, iters=150)
        cfg2.out_dir = str(tmp_path / "again")
        train_stage1(cfg2, ds)
        first = (tmp_path / "run_stage1" / "loss_log.csv").read_text()
        second = (tmp_path / "again" / "loss_log.csv").read_text()
        assert first == second

    def test_periodic_checkpoints_emitted(self, tmp_path):
        cfg = tiny_config(tmp_path, iters=6)
        cfg.checkpoint_every = 3
        train_stage1(cfg, SyntheticScenes(2, 16, seed=1))
        out = tmp_path / "run_stage1"
        assert (out / "stage1_0000003.pt").exists()
        assert (out / "stage1_0000006.pt").exists()
        assert (out / "stage1.pt").exists()

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(DataError):
            train_stage1(tiny_config(tmp_path), SyntheticScenes(0, 16))


class TestStage2:
    def test_descent_determinism_and_frozen_stage1(self, tmp_path):
        ds = SyntheticScenes(4, 32, seed=6)
        cfg1 = tiny_config(tmp_path, iters=30, size=32)
        ck1 = train_stage1(cfg1, ds)
        frozen = {k: v.clone() for k, v in ck1["models"]["autoencoder"].items()}

        cfg2 = tiny_config(tmp_path, phase="stage2", iters=30, size=32)
        ck2 = train_stage2(cfg2, ck1, ds)
        rows = [r for r in read_log(tmp_path / "run_stage2" / "loss_log.csv")
                if r[1] == "stage2_total"]
        values = [float(r[2]) for r in rows]
        assert np.mean(values[-8:]) < np.mean(values[:8])
        # stage-1 weights stayed frozen through stage-2 training
        for key, tensor in ck2["models"]["autoencoder"].items():
            assert torch.equal(tensor, frozen[key])

        cfg2b = tiny_config(tmp_path, phase="stage2", iters=30, size=32)
        cfg2b.out_dir = str(tmp_path / "run_stage2_b")
        train_stage2(cfg2b, ck1, ds)
        assert (tmp_path / "run_stage2" / "loss_log.csv").read_text() == (
            tmp_path / "run_stage2_b" / "loss_log.csv"
        ).read_text()


class TestJoint:
    def test_no_worse_than_stage2_and_checkpoint_round_trip(self, tmp_path):
        size = 32
        ds = SyntheticScenes(4, size, seed=7)
        cfg1 = tiny_config(tmp_path, iters=120, size=size)
        ck1 = train_stage1(cfg1, ds)
        cfg2 = tiny_config(tmp_path, phase="stage2", iters=120, size=size)
        ck2 = train_stage2(cfg2, ck1, ds)
        cfgj = tiny_config(tmp_path, phase="joint", iters=120, size=size)
        ckj = train_joint(cfgj, ck2, ds)

        def eval_stage2_objective(ckpt):
            ae = ESPAAutoencoder(cfg1.autoencoder)
            load_into(ae, ckpt["models"]["autoencoder"], "ae")
            dec = SemanticDecoder(cfg1.decoder)
            load_into(dec, ckpt["models"]["decoder"], "dec")
            ae.eval(), dec.eval()
            fx = FeaturePyramid(cfg1.feature_seed)
            mask = torch.from_numpy(center_mask(size, size, size // 2))[None]
            total = 0.0
            with torch.no_grad():
                for i in range(len(ds)):
                    s = ds[i]
                    img = s["image"][None]
                    _, f_c = ae(img * (1 - mask), mask)
                    oh = torch.from_numpy(one_hot(s["labels"].numpy(), 4))[None]
                    pred = dec(f_c, oh)
                    total += (l1_loss(pred, img) + perceptual_loss(pred, img, fx)).item()
            return total / len(ds)

        before = eval_stage2_objective(ck2)
        after = eval_stage2_objective(ckj)
        assert after <= before * 1.05

        # save -> load -> forward bitwise
        path = tmp_path / "joint.pt"
        save_checkpoint(ckj, path)
        loaded = load_checkpoint(path)
        ae1 = ESPAAutoencoder(cfg1.autoencoder)
        load_into(ae1, ckj["models"]["autoencoder"], "ae")
        ae2 = ESPAAutoencoder(cfg1.autoencoder)
        load_into(ae2, loaded["models"]["autoencoder"], "ae")
        img = torch.rand(1, 3, size, size)
        mask = (torch.rand(1, 1, size, size) > 0.5).float()
        with torch.no_grad():
            out1, _ = ae1(img, mask)
            out2, _ = ae2(img, mask)
        assert torch.equal(out1, out2)


class TestSegmenterTraining:
    def test_learns_synthetic_scenes(self, tmp_path):
        ds = SyntheticScenes(16, 16, seed=8)
        ckpt = train_segmenter(ds, iters=300, seed=0, base_channels=8,
                               out_path=tmp_path / "seg.pt")
        seg = TinySegmenter(ds.num_classes, 8)
        load_into(seg, ckpt["models"]["segmenter"], "segmenter")
        seg.eval()
        correct = total = 0
        with torch.no_grad():
            for i in range(8):
                s = ds[i]
                pred = seg(s["image"][None])[0].argmax(dim=0)
                correct += (pred == s["labels"][0]).sum().item()
                total += pred.numel()
        assert correct / total > 0.7
