"""Contrastive stage: loss closed forms, pairing policies, augmentation."""

import numpy as np
import pytest

from mrtvqa import autodiff as ad
from mrtvqa.autodiff import Tensor
from mrtvqa.contrastive import (
    AugmentationPolicy,
    ViewBank,
    VolumeEncoder,
    augment_2d,
    bilinear_resize,
    encode_z,
    info_nce,
    nce_accuracy,
    sample_pair,
    pretrain,
    validation_nce_accuracy,
)
from mrtvqa.model import ConfigError


def t64(x, rg=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=rg)


class TestInfoNce:
    def test_single_pair_loss_zero(self):
        z = t64(np.random.default_rng(0).standard_normal((1, 8)))
        assert float(info_nce(z, z, tau=0.1).data) == 0.0

    def test_identical_embeddings_give_ln_n(self):
        # all rows identical -> every similarity equal -> uniform softmax
        rng = np.random.default_rng(1)
        for n in (2, 5, 8):
            z = t64(np.tile(rng.standard_normal(16), (n, 1)))
            assert abs(float(info_nce(z, z, tau=0.1).data) - np.log(n)) < 1e-6

    def test_matches_brute_force_double_loop(self):
        rng = np.random.default_rng(2)
        z1 = rng.standard_normal((8, 16))
        z2 = rng.standard_normal((8, 16))
        tau = 0.37

        def cos(a, b):
            return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

        total = 0.0
        for i in range(8):
            num = np.exp(cos(z1[i], z2[i]) / tau)
            den = sum(np.exp(cos(z1[i], z2[k]) / tau) for k in range(8))
            total += -np.log(num / den)
        brute = total / 8
        ours = float(info_nce(t64(z1), t64(z2), tau=tau).data)
        assert abs(ours - brute) < 1e-6

    def test_positive_scale_invariance_exact(self):
        rng = np.random.default_rng(3)
        z1 = rng.standard_normal((6, 8))
        z2 = rng.standard_normal((6, 8))
        base = float(info_nce(t64(z1), t64(z2), tau=0.2).data)
        z1s = z1.copy()
        z1s[3] *= 4.0  # exact power-of-two scale keeps cosine bit-identical
        scaled = float(info_nce(t64(z1s), t64(z2), tau=0.2).data)
        assert scaled == base

    def test_orthogonal_rows_low_tau_loss_vanishes(self):
        z = t64(np.eye(8))
        assert float(info_nce(z, z, tau=0.01).data) < 1e-3

    def test_zero_norm_row_reports_index(self):
        z = np.ones((4, 3))
        z2 = z.copy()
        z2[2] = 0.0
        with pytest.raises(FloatingPointError, match="row 2"):
            info_nce(t64(z), t64(z2), tau=0.1)

    def test_bad_temperature(self):
        z = t64(np.ones((2, 2)))
        with pytest.raises(ValueError):
            info_nce(z, z, tau=0.0)


class TestNceAccuracy:
    def test_identical_orthogonal_rows_perfect(self):
        z = np.eye(6)
        assert nce_accuracy(t64(z), t64(z)) == 1.0

    def test_rotated_rows_zero(self):
        z = np.eye(6)
        assert nce_accuracy(t64(z), t64(np.roll(z, 1, axis=0))) == 0.0

    def test_random_gaussians_near_chance(self):
        rng = np.random.default_rng(4)
        n, trials = 64, 40
        hits = [
            nce_accuracy(
                t64(rng.standard_normal((n, 8))), t64(rng.standard_normal((n, 8)))
            )
            for _ in range(trials)
        ]
        mean = np.mean(hits)
        sigma = np.sqrt((1 / n) * (1 - 1 / n) / (n * trials))
        assert abs(mean - 1.0 / n) < 3 * sigma + 1e-9

    def test_needs_two_rows(self):
        z = t64(np.ones((1, 4)))
        with pytest.raises(ValueError):
            nce_accuracy(z, z)

    def test_invariant_to_common_orthogonal_transform(self):
        rng = np.random.default_rng(5)
        z1 = rng.standard_normal((10, 6))
        z2 = rng.standard_normal((10, 6))
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        a = nce_accuracy(t64(z1), t64(z2))
        b = nce_accuracy(t64(z1 @ q), t64(z2 @ q))
        assert a == b


class TestEncodeZ:
    def test_constant_volume(self):
        vol = Tensor(np.full((2, 3, 4, 4, 4), 2.5))
        out = encode_z(vol)
        np.testing.assert_allclose(out.data, 2.5)

    def test_linearity(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((1, 2, 3, 3, 3))
        b = rng.standard_normal((1, 2, 3, 3, 3))
        lhs = encode_z(Tensor(2.0 * a + 3.0 * b)).data
        rhs = 2.0 * encode_z(Tensor(a)).data + 3.0 * encode_z(Tensor(b)).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_matches_brute_force_mean(self):
        rng = np.random.default_rng(7)
        vol = rng.standard_normal((1, 3, 2, 2, 2))
        out = encode_z(Tensor(vol)).data[0]
        brute = [vol[0, c].ravel().sum() / 8 for c in range(3)]
        np.testing.assert_allclose(out, brute, atol=1e-7)


class TestPolicies:
    def _views(self, n=5, seed=0):
        rng = np.random.default_rng(seed)
        return rng.integers(0, 255, size=(n, 16, 16, 3)).astype(np.uint8)

    def test_3d_policy_returns_distinct_views(self):
        views = self._views()
        policy = AugmentationPolicy(variant="3d").validate()
        rng = np.random.default_rng(1)
        for _ in range(50):
            _, _, (i, j) = sample_pair(views, policy, rng)
            assert i != j

    def test_3d_policy_rejects_single_view_scene(self):
        policy = AugmentationPolicy(variant="3d").validate()
        with pytest.raises(ValueError):
            sample_pair(self._views(1), policy, np.random.default_rng(0))

    def test_2d_policy_with_no_transforms_rejected(self):
        policy = AugmentationPolicy(variant="2d", crop_scale=(1.0, 1.0), flip_p=0.0, jitter=0.0)
        with pytest.raises(ConfigError):
            policy.validate()

    def test_2d3d_pair_coverage(self):
        views = self._views(20)
        policy = AugmentationPolicy(variant="2d+3d").validate()
        rng = np.random.default_rng(2)
        seen = set()
        for _ in range(1000):
            _, _, (i, j) = sample_pair(views, policy, rng)
            seen.add(frozenset((i, j)))
        assert len(seen) > 0.5 * (20 * 19 // 2)


class TestAugment2d:
    def test_disabled_is_identity(self):
        img = np.random.default_rng(8).random((16, 16, 3))
        policy = AugmentationPolicy(variant="3d", crop_scale=(1.0, 1.0), flip_p=0.0, jitter=0.0)
        out = augment_2d(img, np.random.default_rng(0), policy)
        np.testing.assert_array_equal(out, img)

    def test_output_clamped_and_same_dims(self):
        img = np.random.default_rng(9).random((16, 16, 3))
        policy = AugmentationPolicy(variant="2d").validate()
        for seed in range(10):
            out = augment_2d(img, np.random.default_rng(seed), policy)
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_same_seed_identical_different_seed_differs(self):
        img = np.random.default_rng(10).random((16, 16, 3))
        policy = AugmentationPolicy(variant="2d").validate()
        a = augment_2d(img, np.random.default_rng(5), policy)
        b = augment_2d(img, np.random.default_rng(5), policy)
        c = augment_2d(img, np.random.default_rng(6), policy)
        np.testing.assert_array_equal(a, b)
        assert np.abs(a - c).max() > 0

    def test_bilinear_resize_identity(self):
        img = np.random.default_rng(11).random((8, 8, 3))
        np.testing.assert_array_equal(bilinear_resize(img, 8, 8), img)


class TestEncoderAndPretrain:
    def test_encode_h_output_dims(self):
        enc = VolumeEncoder(c_vol=4, d_vol=4, seed=0, widths=(4, 8, 16))
        x = np.random.default_rng(12).standard_normal((2, 3, 64, 64)).astype(np.float32)
        enc.eval()
        with ad.no_grad():
            vol = enc.encode(x)
        assert vol.shape == (2, 4, 4, 8, 8)

    def test_encode_h_deterministic(self):
        enc = VolumeEncoder(c_vol=4, d_vol=4, seed=0, widths=(4, 8, 16))
        enc.eval()
        x = np.random.default_rng(13).standard_normal((1, 3, 64, 64)).astype(np.float32)
        with ad.no_grad():
            a = enc.encode(x).data
            b = enc.encode(x).data
        np.testing.assert_array_equal(a, b)

    def test_view_bank_holds_no_camera_fields(self):
        bank = ViewBank([0], [np.zeros((2, 8, 8, 3), dtype=np.uint8)])
        blob = " ".join(vars(bank).keys()).lower()
        assert "camera" not in blob and "azimuth" not in blob and "pose" not in blob

    def test_pretrain_smoke_and_frozen_output(self, tmp_path):
        rng = np.random.default_rng(14)
        images = [rng.integers(0, 255, size=(3, 64, 64, 3)).astype(np.uint8) for _ in range(8)]
        train_bank = ViewBank(list(range(8)), images)
        val_bank = ViewBank(list(range(8)), images)
        policy = AugmentationPolicy(variant="3d").validate()
        enc = VolumeEncoder(c_vol=4, d_vol=4, seed=0, widths=(4, 8, 8))
        result = pretrain(
            train_bank,
            val_bank,
            policy,
            batch=4,
            epochs=1,
            seed=0,
            out_dir=tmp_path,
            encoder=enc,
        )
        assert (tmp_path / "contrastive_encoder.mrtc").exists()
        assert (tmp_path / "nce_curve.csv").exists()
        assert all(not p.requires_grad for p in result.encoder.parameters())

    def test_validation_needs_enough_scenes(self):
        bank = ViewBank([0], [np.zeros((2, 8, 8, 3), dtype=np.uint8)])
        enc = VolumeEncoder(c_vol=4, d_vol=4, seed=0, widths=(4, 8, 8))
        with pytest.raises(ConfigError):
            validation_nce_accuracy(enc, bank, batch=128)
