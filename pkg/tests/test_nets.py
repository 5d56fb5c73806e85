import numpy as np
import pytest

from fdp import autodiff as ad
from fdp import nets, phantoms, training
from fdp.autodiff import Tensor
from fdp.domain import DomainError, PreferenceVector


@pytest.fixture(scope="module")
def cfg():
    return nets.NetConfig()


@pytest.fixture(scope="module")
def vqvae(cfg):
    return nets.VqVae(np.random.default_rng(0), cfg)


@pytest.fixture(scope="module")
def case():
    return phantoms.generate_phantom(phantoms.random_spec(7))


class TestQuantize:
    def test_matches_exhaustive_search_with_ties(self, cfg):
        rng = np.random.default_rng(1)
        codebook = nets.Codebook(rng, 32, 4)
        latents = rng.normal(0, 1, (1000, 4)).astype(np.float32)
        grid = nets.quantize(Tensor(latents.reshape(1, 10, 10, 10, 4)), codebook)
        flat_q = grid.quantized.data.reshape(-1, 4)
        flat_idx = grid.indices.reshape(-1)
        vecs = codebook.vectors.data
        for i in range(1000):
            dists = [float(((latents[i] - vecs[k]) ** 2).sum()) for k in range(32)]
            best = min(range(32), key=lambda k: (dists[k], k))
            assert flat_idx[i] == best
            assert np.array_equal(flat_q[i], vecs[best])   # bit equality

    def test_tie_breaks_to_lowest_index(self):
        rng = np.random.default_rng(2)
        codebook = nets.Codebook(rng, 4, 2)
        codebook.vectors.data = np.array([[1, 0], [1, 0], [0, 1], [2, 0]], np.float32)
        grid = nets.quantize(Tensor(np.array([[[[[1.0, 0.0]]]]], np.float32)), codebook)
        assert grid.indices.reshape(-1)[0] == 0

    def test_exact_codeword_zero_error(self):
        rng = np.random.default_rng(3)
        codebook = nets.Codebook(rng, 8, 3)
        z = codebook.vectors.data[5].reshape(1, 1, 1, 1, 3).copy()
        grid = nets.quantize(Tensor(z), codebook)
        assert grid.indices.reshape(-1)[0] == 5
        assert np.array_equal(grid.quantized.data.reshape(3), codebook.vectors.data[5])

    def test_straight_through_gradient_identity(self):
        rng = np.random.default_rng(4)
        codebook = nets.Codebook(rng, 16, 4)
        z_data = rng.normal(0, 1, (1, 2, 2, 2, 4))

        def downstream(t):
            return ad.mean(ad.mul(t, t))

        z1 = ad.tensor(z_data, requires_grad=True, dtype=np.float64)
        with ad.Tape():
            grid = nets.quantize(z1, codebook)
            ad.backward(downstream(grid.straight_through))
        z2 = ad.tensor(grid.quantized.data.copy(), requires_grad=True, dtype=np.float64)
        with ad.Tape():
            ad.backward(downstream(z2))
        assert np.allclose(z1.grad, z2.grad, rtol=1e-6)

    def test_codebook_receives_gradient(self):
        rng = np.random.default_rng(5)
        codebook = nets.Codebook(rng, 8, 2)
        z = ad.tensor(rng.normal(0, 1, (1, 2, 2, 1, 2)), dtype=np.float64)
        with ad.Tape():
            grid = nets.quantize(z, codebook)
            ad.backward(ad.mean(ad.tabs(grid.quantized)))
        assert codebook.vectors.grad is not None
        assert np.abs(codebook.vectors.grad).sum() > 0

    def test_channel_mismatch_rejected(self, cfg):
        codebook = nets.Codebook(np.random.default_rng(0), 8, 4)
        with pytest.raises(ad.ShapeError):
            nets.quantize(Tensor(np.zeros((1, 2, 2, 2, 3), np.float32)), codebook)

    def test_empty_codebook_rejected(self):
        with pytest.raises(DomainError):
            nets.Codebook(np.random.default_rng(0), 0, 4)


class TestStageOne:
    def test_encode_shape(self, vqvae):
        x = Tensor(np.zeros((1, 32, 32, 32, 1), np.float32))
        grid = vqvae.encode(x)
        assert grid.latent.shape == (1, 8, 8, 8, 4)

    def test_zero_input_finite_latent(self, vqvae):
        x = Tensor(np.zeros((1, 32, 32, 32, 1), np.float32))
        assert np.isfinite(vqvae.encode(x).latent.data).all()

    def test_batch_preserved(self, vqvae):
        x = Tensor(np.zeros((2, 32, 32, 32, 1), np.float32))
        grid = vqvae.quantize(vqvae.encode(x))
        recon = vqvae.decode(grid.straight_through)
        assert recon.shape == (2, 32, 32, 32, 1)

    def test_decode_non_negative(self, vqvae):
        z = Tensor(np.zeros((1, 8, 8, 8, 4), np.float32))
        out = vqvae.decode(z)
        assert np.isfinite(out.data).all() and (out.data >= 0).all()

    def test_discriminator_scalar_scores(self, cfg, vqvae):
        disc = nets.Discriminator(np.random.default_rng(1), cfg)
        x = Tensor(np.random.default_rng(2).random((3, 32, 32, 32, 1)).astype(np.float32))
        scores = disc(x)
        assert scores.shape == (3,)
        assert np.isfinite(scores.data).all()
        singles = [disc(Tensor(x.data[i:i + 1])).data[0] for i in range(3)]
        assert np.allclose(scores.data, singles, rtol=1e-5)


class TestStageTwo:
    def test_input_assembly(self, case):
        chans = nets.assemble_input(case)
        assert chans.shape == (1,) + case.ct.dims + (7,)
        ptvs = sorted(case.ptvs, key=lambda s: s.name)
        assert np.array_equal(chans[0, ..., 1] > 0, ptvs[0].voxels)
        oars = sorted(case.oars, key=lambda s: s.name)
        got = chans[0, ..., 4][oars[1].voxels]
        assert np.allclose(got, 2 / 6)
        rx = max(s.prescription for s in case.ptvs)
        assert chans[0, ..., 6].max() == pytest.approx(rx / nets.DOSE_SCALE)

    def test_condition_vector_layout(self, case):
        pref = PreferenceVector.neutral(case, hi=0.11)
        vec = nets.condition_vector(case, pref)
        assert vec.shape == (1, nets.COND_DIM)
        assert np.allclose(vec[0, :3][:len(case.ptvs)], 0.0)   # 0.11 is mid-range
        assert np.allclose(vec[0, 3:3 + len(case.oars)], 0.0)  # weight 1 is mid-range

    def test_forward_deterministic_and_nonnegative(self, case, vqvae, cfg):
        model = nets.Stage2Model(np.random.default_rng(3), cfg, decoder=vqvae.decoder)
        pref = PreferenceVector.neutral(case)
        d1, z1 = nets.stage2_forward(model, case, pref)
        d2, z2 = nets.stage2_forward(model, case, pref)
        assert np.array_equal(d1.values, d2.values)
        assert np.array_equal(z1, z2)
        assert (d1.values >= 0).all()

    def test_different_preferences_differ(self, case, vqvae, cfg):
        model = nets.Stage2Model(np.random.default_rng(3), cfg, decoder=vqvae.decoder)
        # break the zero-init so conditioning reaches the features
        rng = np.random.default_rng(9)
        for name, t in model.encoder.cond.parameters().items():
            t.data = rng.normal(0, 0.2, t.data.shape).astype(np.float32)
        p1 = PreferenceVector.neutral(case, hi=0.03)
        p2 = PreferenceVector.neutral(case, hi=0.19)
        d1, _ = nets.stage2_forward(model, case, p1)
        d2, _ = nets.stage2_forward(model, case, p2)
        assert np.abs(d1.values - d2.values).max() > 0

    def test_adain_identity_reduction(self, case, vqvae, cfg):
        model = nets.Stage2Model(np.random.default_rng(4), cfg, decoder=vqvae.decoder)
        x = Tensor(nets.assemble_input(case))
        cond = Tensor(nets.condition_vector(case, PreferenceVector.neutral(case)))
        conditioned, _ = model.forward(x, cond)   # heads zero-init: scale 1, shift 0
        unconditioned, _ = model.forward(x, None)
        assert np.array_equal(conditioned.data, unconditioned.data)

    def test_missing_structure_entry_rejected(self, case, vqvae, cfg):
        model = nets.Stage2Model(np.random.default_rng(5), cfg, decoder=vqvae.decoder)
        pref = PreferenceVector({}, {}, np.zeros(12, np.float32))
        with pytest.raises(DomainError):
            nets.stage2_forward(model, case, pref)


class TestCheckpoint:
    def test_round_trip_and_determinism(self, tmp_path, vqvae, cfg):
        disc = nets.Discriminator(np.random.default_rng(6), cfg)
        meta = {"stage": 1, "seed": 0, "config": cfg.to_dict()}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        nets.save_checkpoint(p1, meta, {"vqvae": vqvae, "disc": disc})
        nets.save_checkpoint(p2, meta, {"vqvae": vqvae, "disc": disc})
        assert p1.read_bytes() == p2.read_bytes()

        got_meta, tensors = nets.load_checkpoint(p1)
        assert got_meta == meta
        fresh = nets.VqVae(np.random.default_rng(99), cfg)
        nets.restore_module(fresh, "vqvae", tensors)
        for name, t in vqvae.parameters("vqvae.").items():
            assert np.array_equal(t.data, tensors[name])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(DomainError):
            nets.load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path, vqvae, cfg):
        path = tmp_path / "a.ckpt"
        nets.save_checkpoint(path, {"config": cfg.to_dict()}, {"vqvae": vqvae})
        _, tensors = nets.load_checkpoint(path)
        other = nets.VqVae(np.random.default_rng(0), nets.NetConfig(enc_channels=(8, 32)))
        with pytest.raises(DomainError):
            nets.restore_module(other, "vqvae", tensors)
