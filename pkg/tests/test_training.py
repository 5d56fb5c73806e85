import numpy as np
import pytest

from fdp import nets, phantoms, training
from fdp.domain import DomainError, HI_RANGE, OAR_WEIGHT_RANGE


@pytest.fixture(scope="module")
def cohort():
    return phantoms.generate_cohort(8, 11)


@pytest.fixture(scope="module")
def stage1_result(cohort, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "s1.ckpt"
    cfg = training.TrainConfig(stage=1, epochs=2, batch_size=3, seed=5)
    return training.train_stage1(cohort, cfg, out)


@pytest.fixture(scope="module")
def stage2_result(cohort, stage1_result, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "s2.ckpt"
    cfg = training.TrainConfig(stage=2, epochs=2, batch_size=3, seed=5)
    return training.train_stage2(cohort, stage1_result.checkpoint_path, cfg, out)


class TestConfig:
    def test_stage_validated(self):
        with pytest.raises(DomainError):
            training.TrainConfig(stage=3, epochs=1)

    def test_positive_rates(self):
        with pytest.raises(DomainError):
            training.TrainConfig(stage=1, epochs=1, lr_generator=0.0)

    def test_batch_floor(self):
        with pytest.raises(DomainError):
            training.TrainConfig(stage=1, epochs=1, batch_size=1)


class TestStage1:
    def test_smoke_finite_losses(self, stage1_result):
        assert not stage1_result.diverged
        assert stage1_result.log_lines[0] == training.METRIC_LOG_HEADER
        for line in stage1_result.log_lines[1:]:
            vals = [float(tok) for tok in line.split(",")]
            assert all(np.isfinite(v) for v in vals)

    def test_log_format(self, stage1_result):
        parts = stage1_result.log_lines[1].split(",")
        assert len(parts) == 7

    def test_sliders_within_ranges(self, stage1_result):
        lo = min(HI_RANGE[0], OAR_WEIGHT_RANGE[0])
        hi = max(HI_RANGE[1], OAR_WEIGHT_RANGE[1])
        assert stage1_result.slider_samples
        assert all(lo <= s <= hi for s in stage1_result.slider_samples)

    def test_checkpoint_loadable(self, stage1_result):
        vqvae, disc, cfg = training.load_stage1(stage1_result.checkpoint_path)
        assert cfg == nets.NetConfig()

    def test_deterministic_checkpoint(self, cohort, stage1_result, tmp_path):
        cfg = training.TrainConfig(stage=1, epochs=2, batch_size=3, seed=5)
        rerun = training.train_stage1(cohort, cfg, tmp_path / "s1b.ckpt")
        assert (rerun.checkpoint_path.read_bytes()
                == stage1_result.checkpoint_path.read_bytes())

    def test_first_epoch_loss_reproducible(self, cohort, stage1_result, tmp_path):
        cfg = training.TrainConfig(stage=1, epochs=1, batch_size=3, seed=5)
        rerun = training.train_stage1(cohort, cfg, tmp_path / "s1c.ckpt")
        n = len(rerun.log_lines)
        assert rerun.log_lines[1:n] == stage1_result.log_lines[1:n]


class TestStage2:
    def test_smoke(self, stage2_result):
        assert not stage2_result.diverged
        assert stage2_result.val_mae_history

    def test_decoder_frozen_bit_identical(self, stage1_result, stage2_result):
        _, t1 = nets.load_checkpoint(stage1_result.checkpoint_path)
        _, t2 = nets.load_checkpoint(stage2_result.checkpoint_path)
        dec1 = {k.removeprefix("vqvae.decoder."): v for k, v in t1.items()
                if k.startswith("vqvae.decoder.")}
        dec2 = {k.removeprefix("decoder."): v for k, v in t2.items()
                if k.startswith("decoder.")}
        assert set(dec1) == set(dec2)
        for k in dec1:
            assert np.array_equal(dec1[k], dec2[k])

    def test_requires_stage1_or_ablation_flag(self, cohort):
        cfg = training.TrainConfig(stage=2, epochs=1, batch_size=3, seed=5)
        with pytest.raises((DomainError, FileNotFoundError)):
            training.train_stage2(cohort, "/nonexistent.ckpt", cfg, "/tmp/x.ckpt")

    def test_ablation_arm_trains_decoder(self, cohort, tmp_path):
        cfg = training.TrainConfig(stage=2, epochs=1, batch_size=3, seed=5)
        result = training.train_stage2(cohort, None, cfg, tmp_path / "np.ckpt")
        assert not result.diverged
        meta, _ = nets.load_checkpoint(result.checkpoint_path)
        assert meta["pretrained"] is False

    def test_stage2_checkpoint_roundtrip(self, stage2_result, cohort):
        model, cfg = training.load_stage2(stage2_result.checkpoint_path)
        case = cohort.cases[0]
        pref = training.style_matched_pref(case)
        pred, _ = nets.stage2_forward(model, case, pref)
        assert np.isfinite(pred.values).all()

    def test_wrong_stage_rejected(self, stage1_result):
        with pytest.raises(DomainError):
            training.load_stage2(stage1_result.checkpoint_path)


class TestAdam:
    def test_skips_frozen_params(self):
        from fdp.autodiff import Tensor
        frozen = Tensor(np.ones(3, np.float32), requires_grad=False)
        live = Tensor(np.ones(3, np.float32), requires_grad=True)
        opt = training.Adam({"a.frozen": frozen, "b.live": live}, 0.1)
        live.grad = np.ones(3, np.float32)
        frozen.grad = np.ones(3, np.float32)
        before = frozen.data.copy()
        opt.step()
        assert np.array_equal(frozen.data, before)
        assert not np.array_equal(live.data, np.ones(3, np.float32))

    def test_descends_quadratic(self):
        from fdp.autodiff import Tensor
        x = Tensor(np.array([5.0], np.float32), requires_grad=True)
        opt = training.Adam({"x": x}, 0.1)
        for _ in range(200):
            x.grad = 2 * x.data
            opt.step()
        assert abs(float(x.data[0])) < 0.1


class TestHelpers:
    def test_style_matched_pref_in_range(self, cohort):
        for case in cohort.cases:
            pref = training.style_matched_pref(case)
            for v in pref.hi_target.values():
                assert HI_RANGE[0] <= v <= HI_RANGE[1]
            assert all(w == 1.0 for w in pref.oar_weight.values())

    def test_masked_mae_gy(self):
        ref = np.full((4, 4, 4), 10.0)
        pred = np.full((4, 4, 4), 13.0)
        assert training.masked_mae_gy(pred, ref) == pytest.approx(3.0)
        with pytest.raises(DomainError):
            training.masked_mae_gy(pred, np.zeros((4, 4, 4)))
