import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from talkstyle import vqpose
from talkstyle.errors import DimensionError, InputError, StateError, TrainingError
from talkstyle.vqpose import VQVAE, VQConfig, quantize, recon_loss, vq_objective

f64 = torch.float64


def small_cfg(**kw) -> VQConfig:
    return VQConfig(**{"M": 8, "d_z": 4, "hidden": 16, **kw})


class TestEncode:
    @pytest.mark.parametrize("T", [100, 98])
    def test_latent_length(self, T):
        assert VQVAE().encode(torch.zeros(T, 3)).shape == (25, 16)

    def test_edge_padding(self):
        x = torch.arange(5.0).reshape(5, 1)
        assert vqpose.pad_to_multiple(x, 4).flatten().tolist() == [0, 1, 2, 3, 4, 4, 4, 4]
        assert vqpose.pad_to_multiple(x, 5) is x

    def test_too_short(self):
        with pytest.raises(InputError):
            VQVAE().encode(torch.zeros(3, 3))

    def test_constant_pose_gives_constant_latent(self):
        torch.manual_seed(0)
        model = VQVAE()
        for value in (0.0, 0.3):
            z = model.encode(torch.full((37, 3), value))
            assert torch.equal(z, z[:1].expand_as(z))

    def test_batch_axis(self):
        model = VQVAE(small_cfg())
        x = torch.randn(3, 40, 3)
        torch.testing.assert_close(model.encode(x)[1], model.encode(x[1]))


class TestQuantize:
    def test_exact_entry(self):
        cb = torch.randn(8, 4)
        idx, zq = quantize(cb[3:4], cb)
        assert idx.tolist() == [3] and torch.equal(zq, cb[3:4])

    def test_hand_example(self):
        cb = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        assert quantize(torch.tensor([[0.9, 0.2]]), cb)[0].tolist() == [1]

    def test_tie_goes_to_lowest_index(self):
        cb = torch.tensor([[1.0, 0.0], [5.0, 5.0], [-1.0, 0.0]])
        assert quantize(torch.tensor([[0.0, 0.0]]), cb)[0].tolist() == [0]

    def test_errors(self):
        with pytest.raises(StateError):
            quantize(torch.zeros(2, 4), torch.zeros(0, 4))
        with pytest.raises(DimensionError):
            quantize(torch.zeros(2, 4), torch.zeros(3, 5))

    @given(M=st.integers(1, 10), T=st.integers(1, 8), d=st.integers(1, 4), seed=st.integers(0, 2**16))
    def test_matches_brute_force(self, M, T, d, seed):
        rng = np.random.default_rng(seed)
        cb = rng.integers(-2, 3, size=(M, d)).astype(np.float64)
        z = rng.integers(-2, 3, size=(T, d)).astype(np.float64)
        idx, _ = quantize(torch.from_numpy(z), torch.from_numpy(cb))
        for t in range(T):
            best = min(range(M), key=lambda m: (sum((z[t, i] - cb[m, i]) ** 2 for i in range(d)), m))
            assert idx[t] == best


class TestDecode:
    def test_zero_latent_with_zero_head(self):
        model = VQVAE()
        with torch.no_grad():
            model.decoder.conv3.weight.zero_()
            model.decoder.conv3.bias.zero_()
        out = model.decode(torch.zeros(25, 16))
        assert out.shape == (100, 3) and torch.count_nonzero(out) == 0

    def test_output_length(self):
        model = VQVAE(small_cfg(w=2))
        assert model.decode(torch.randn(7, 4)).shape == (14, 3)
        assert model.reconstruct(torch.randn(33, 3)).shape == (33, 3)


class TestLosses:
    def test_identical(self):
        x = torch.randn(10, 3)
        assert recon_loss(x, x).item() == 0.0

    def test_hand_example(self):
        pred, gt = torch.tensor([[0.0], [1.0]]), torch.zeros(2, 1)
        assert recon_loss(pred, gt, 1.0, 0.0).item() == 1.5

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            recon_loss(torch.zeros(4, 3), torch.zeros(5, 3))

    @given(seed=st.integers(0, 2**16), c=st.floats(-3, 3))
    def test_derivative_terms_ignore_offsets(self, seed, c):
        g = torch.Generator().manual_seed(seed)
        pred, gt = torch.randn(12, 3, generator=g, dtype=f64), torch.randn(12, 3, generator=g, dtype=f64)
        base = recon_loss(pred, gt)
        torch.testing.assert_close(recon_loss(pred + c, gt + c), base, rtol=1e-12, atol=1e-12)
        # shifting one side moves only the L1 term
        l1 = lambda a, b: (a - b).abs().mean()
        moved = recon_loss(pred + c, gt) - l1(pred + c, gt)
        torch.testing.assert_close(moved, base - l1(pred, gt), rtol=1e-12, atol=1e-12)

    def test_objective_zero_on_codebook(self):
        x = torch.randn(8, 3)
        zq = torch.randn(2, 4)
        assert vq_objective(x, x, zq, zq, 0.25, 1.0, 1.0).item() == 0.0

    def test_objective_hand_example(self):
        x = torch.zeros(4, 3)
        z, zq = torch.tensor([[1.0, 0.0]]), torch.zeros(1, 2)
        assert vq_objective(x, x, z, zq, 0.25, 1.0, 1.0).item() == 1.25

    def test_codebook_term_does_not_reach_encoder(self):
        torch.manual_seed(0)
        model = VQVAE(small_cfg())
        z = model.encode(torch.randn(16, 3))
        _, zq = model.quantize(z)
        codebook_term = vqpose._safe_norm(z.detach() - zq).mean()
        codebook_term.backward()
        assert all(p.grad is None for p in model.encoder.parameters())
        assert model.codebook.grad is not None and model.codebook.grad.abs().sum() > 0

    def test_safe_norm_gradient_at_origin(self):
        z = torch.zeros(3, 2, requires_grad=True)
        vqpose._safe_norm(z).sum().backward()
        assert torch.isfinite(z.grad).all() and torch.count_nonzero(z.grad) == 0


class TestTraining:
    def _poses(self):
        rng = np.random.default_rng(0)
        return [rng.normal(size=(32, 3)).astype(np.float32) * 0.2 for _ in range(4)]

    def test_zero_steps_equals_init(self):
        trained, hist = vqpose.train_vqvae(self._poses(), small_cfg(), steps=0, seed=4)
        torch.manual_seed(4)
        fresh = VQVAE(small_cfg())
        assert hist.loss == []
        for k, v in fresh.state_dict().items():
            assert torch.equal(trained.state_dict()[k], v)

    def test_deterministic(self):
        a, ha = vqpose.train_vqvae(self._poses(), small_cfg(), steps=15, seed=2)
        b, hb = vqpose.train_vqvae(self._poses(), small_cfg(), steps=15, seed=2)
        assert ha.loss == hb.loss
        assert all(torch.equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())

    def test_nan_aborts_with_step(self):
        poses = self._poses()
        poses[1][5, 0] = np.nan
        with pytest.raises(TrainingError, match="step 0"):
            vqpose.train_vqvae(poses, small_cfg(), steps=3)

    def test_usage_counts_every_latent_frame(self):
        model, hist = vqpose.train_vqvae(self._poses(), small_cfg(), steps=5)
        assert sum(hist.usage) == 4 * 8
        assert len(hist.usage) == 8

    def test_trained_corpus_model(self, pose_run):
        """The shared two-style model reconstructs its training clips well."""
        assert pose_run.vq_l1[-1] < 0.2 * pose_run.vq_l1[0]
        errs = [
            np.abs(pose_run.vq.reconstruct(torch.as_tensor(s.pose)).numpy() - s.pose).mean()
            for s in pose_run.train
        ]
        assert max(errs) < pose_run.vq_l1[0]
        assert np.count_nonzero(pose_run.vq.usage.numpy()) >= 2

    def test_codebook_minimum(self):
        with pytest.raises(InputError):
            VQVAE(VQConfig(M=1))


def test_stride_factors():
    for w, expect in [(1, []), (2, [2]), (4, [2, 2]), (6, [2, 3]), (8, [2, 2, 2])]:
        assert vqpose._stride_factors(w) == expect
    for w in range(1, 13):
        assert int(np.prod(vqpose._stride_factors(w))) == w


@pytest.mark.parametrize("w", [2, 3, 4, 6])
def test_latent_length_for_other_windows(w):
    model = VQVAE(small_cfg(w=w))
    for T in itertools.chain(range(w, w + 8), [50]):
        assert model.encode(torch.zeros(T, 3)).shape[0] == -(-T // w)
