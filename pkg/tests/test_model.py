"""Model family contracts: encoders, FILM blocks, question encoder, wiring."""

import numpy as np
import pytest

from mrtvqa import autodiff as ad
from mrtvqa.autodiff import Tensor
from mrtvqa.gradcheck import check_gradients, random_tensor
from mrtvqa.layers import GRUCell, gru_sequence
from mrtvqa.model import (
    ConfigError,
    FilmParams,
    ModelConfig,
    Postprocessor2dTo3d,
    QuestionEncoder,
    VqaModel,
    coord_channels,
    film_modulate,
    lift_to_volume,
)
from mrtvqa.optim import Adam

RNG = lambda s=0: np.random.default_rng(s)


def small_cfg(**kw):
    base = dict(
        n_resblocks=2,
        nf=8,
        rnn_dim=16,
        embed_dim=8,
        enc_channels=(4, 8, 8),
        vol_channels=4,
        vol_depth=4,
        nf3d=4,
        ncf=8,
    )
    base.update(kw)
    return ModelConfig(**base)


def batch(n=2, vocab=30, T=8, size=64, seed=0):
    rng = RNG(seed)
    return (
        rng.standard_normal((n, 3, size, size)).astype(np.float32),
        rng.integers(1, vocab, size=(n, T)),
        rng.standard_normal((n, 6)).astype(np.float32),
    )


class TestGRU:
    def test_zero_weights_halve_hidden_state(self):
        cell = GRUCell(3, 4, RNG(), dtype=np.float64)
        for p in cell.parameters():
            p.data[...] = 0.0
        h = Tensor(np.arange(8, dtype=np.float64).reshape(2, 4))
        x = Tensor(np.ones((2, 3)))
        out = cell.step(x, h)
        np.testing.assert_allclose(out.data, h.data * 0.5, atol=1e-12)

    def test_zero_hidden_size_rejected(self):
        with pytest.raises(ValueError):
            GRUCell(3, 0, RNG())

    def test_empty_sequence_rejected(self):
        cell = GRUCell(3, 4, RNG())
        with pytest.raises(ValueError):
            gru_sequence([cell], [])

    def test_gradients_reach_all_weight_matrices(self):
        rng = RNG(1)
        cell = GRUCell(3, 4, np.random.default_rng(7), dtype=np.float64)
        x = random_tensor(rng, (2, 3), requires_grad=False)
        h = random_tensor(rng, (2, 4), requires_grad=False)
        params = [p for _, p in cell.named_parameters()]
        rel = check_gradients(lambda *ps: ad.sum_all(ad.tanh(cell.step(x, h))), params)
        assert rel < 1e-4


class TestQuestionEncoder:
    def _enc(self):
        return QuestionEncoder(30, small_cfg(), RNG(3))

    def test_identical_sequences_identical_embeddings(self):
        enc = self._enc()
        toks = np.array([[3, 4, 5, 0], [3, 4, 5, 0]])
        with ad.no_grad():
            out = enc(toks).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_trailing_padding_is_invisible(self):
        enc = self._enc()
        with ad.no_grad():
            short = enc(np.array([[7, 8, 9]])).data
            padded = enc(np.array([[7, 8, 9, 0, 0, 0]])).data
        np.testing.assert_array_equal(short, padded)

    def test_word_order_matters(self):
        enc = self._enc()
        with ad.no_grad():
            a = enc(np.array([[7, 8, 9]])).data
            b = enc(np.array([[8, 7, 9]])).data
        assert np.linalg.norm(a - b) > 0


class TestFilm:
    def test_identity_params(self):
        x = Tensor(RNG(4).standard_normal((2, 3, 4, 4)))
        p = FilmParams(Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(film_modulate(x, p).data, x.data)

    def test_zero_gamma_gives_constant_beta(self):
        x = Tensor(RNG(5).standard_normal((2, 3, 4)))
        p = FilmParams(Tensor(np.zeros(3)), Tensor(np.array([1.0, 2.0, 3.0])))
        out = film_modulate(x, p).data
        for c in range(3):
            np.testing.assert_allclose(out[:, c], c + 1.0)

    def test_matches_elementwise_formula(self):
        rng = RNG(6)
        x = rng.standard_normal((2, 3, 5))
        g = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 3))
        out = film_modulate(Tensor(x), FilmParams(Tensor(g), Tensor(b))).data
        np.testing.assert_allclose(out, g[..., None] * x + b[..., None], atol=1e-7)

    def test_linear_in_features(self):
        rng = RNG(7)
        x1, x2 = rng.standard_normal((2, 2, 3, 4)), rng.standard_normal((2, 2, 3, 4))
        p = FilmParams(Tensor(rng.standard_normal(2)), Tensor(np.zeros(2)))
        lhs = film_modulate(Tensor(3.0 * x1 + 2.0 * x2), p).data
        beta_part = film_modulate(Tensor(np.zeros_like(x1)), p).data
        rhs = (
            3.0 * film_modulate(Tensor(x1), p).data
            + 2.0 * film_modulate(Tensor(x2), p).data
        )
        np.testing.assert_allclose(lhs + 4.0 * beta_part, rhs, atol=1e-6)


class TestVolumeLift:
    def test_factorization(self):
        h = Tensor(np.zeros((2, 256, 8, 8)))
        vol = lift_to_volume(h, 32, 8)
        assert vol.shape == (2, 32, 8, 8, 8)

    def test_factorization_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="factorization"):
            lift_to_volume(Tensor(np.zeros((2, 100, 8, 8))), 32, 8)

    def test_reshape_round_trip(self):
        rng = RNG(8)
        pp = Postprocessor2dTo3d(8, 4, 4, RNG(9))
        h = Tensor(rng.standard_normal((2, 8, 8, 8)).astype(np.float32))
        with ad.no_grad():
            flat = pp.features_2d(h)
            vol = lift_to_volume(flat, 4, 4)
        np.testing.assert_array_equal(
            vol.data.reshape(flat.shape), flat.data
        )


class TestCoordChannels:
    def test_shape_and_range(self):
        c = coord_channels(3, (4, 5))
        assert c.shape == (3, 2, 4, 5)
        assert c.data.min() == -1.0 and c.data.max() == 1.0
        c3 = coord_channels(2, (4, 4, 4))
        assert c3.shape == (2, 3, 4, 4, 4)


class TestVqaModel:
    def test_logit_count_matches_answer_vocab(self):
        model = VqaModel(small_cfg(), 30, 28, seed=0)
        imgs, toks, cams = batch()
        with ad.no_grad():
            out = model(imgs, toks, cams)
        assert out.shape == (2, 28)

    def test_encoder_output_resolution(self):
        model = VqaModel(small_cfg(), 30, 28, seed=0)
        imgs, _, _ = batch()
        with ad.no_grad():
            feats = model.encoder(Tensor(imgs))
        assert feats.shape[2:] == (8, 8)

    def test_indivisible_image_size_rejected(self):
        model = VqaModel(small_cfg(), 30, 28, seed=0)
        with pytest.raises(ConfigError):
            with ad.no_grad():
                model.encoder(Tensor(np.zeros((1, 3, 60, 60), dtype=np.float32)))

    def test_camera_rotation_requires_3d(self):
        with pytest.raises(ConfigError):
            ModelConfig(camera_rotation=True, use_3d=False).validate()

    def test_no_camera_flags_logits_independent_of_camera(self):
        model = VqaModel(small_cfg(), 30, 28, seed=0)
        model.eval()
        imgs, toks, cams = batch()
        with ad.no_grad():
            a = model(imgs, toks, cams).data
            b = model(imgs, toks, cams + 100.0).data
        np.testing.assert_array_equal(a, b)

    def test_camera_embed_changes_logits(self):
        model = VqaModel(small_cfg(camera_embed=True), 30, 28, seed=0)
        model.eval()
        imgs, toks, cams = batch()
        with ad.no_grad():
            a = model(imgs, toks, cams).data
            b = model(imgs, toks, cams + 1.0).data
        assert np.abs(a - b).max() > 0

    def test_camera_rotation_changes_logits_with_nonzero_head(self):
        cfg = small_cfg(use_3d=True, camera_rotation=True)
        model = VqaModel(cfg, 30, 28, seed=0)
        # the rotation head is zero-initialized by design; nudge it off zero
        model.camera_rot.fc2.w.data[...] = 0.05
        model.eval()
        imgs, toks, cams = batch()
        with ad.no_grad():
            a = model(imgs, toks, cams).data
            b = model(imgs, toks, cams + 1.0).data
        assert np.abs(a - b).max() > 0

    def test_rotation_head_starts_at_identity(self):
        cfg = small_cfg(use_3d=True, camera_rotation=True)
        model = VqaModel(cfg, 30, 28, seed=0)
        with ad.no_grad():
            pose = model.camera_rot(Tensor(np.random.randn(4, 6).astype(np.float32)))
        np.testing.assert_array_equal(pose.data, np.zeros((4, 6)))

    def test_camera_film_embed_identity_when_ncf_unset(self):
        model = VqaModel(small_cfg(camera_embed=True, ncf=None), 30, 28, seed=0)
        c = Tensor(np.arange(12, dtype=np.float32).reshape(2, 6))
        out = model.camera_embed(c)
        np.testing.assert_array_equal(out.data, c.data)

    def test_with_coords_adds_dims_channels(self):
        cfg = small_cfg(with_coords=True)
        model = VqaModel(cfg, 30, 28, seed=0)
        blk = model.blocks[0]
        assert blk.conv.w.shape[1] == cfg.nf + 2
        cfg3 = small_cfg(use_3d=True, with_coords=True)
        model3 = VqaModel(cfg3, 30, 28, seed=0)
        assert model3.blocks[0].conv.w.shape[1] == cfg3.nf3d + 3

    def test_different_conditioning_different_outputs(self):
        model = VqaModel(small_cfg(), 30, 28, seed=0)
        model.eval()
        imgs, toks, cams = batch()
        toks2 = toks.copy()
        toks2[:, 0] = (toks2[:, 0] % 28) + 1
        with ad.no_grad():
            a = model(imgs, toks, cams).data
            b = model(imgs, toks2, cams).data
        assert np.abs(a - b).max() > 0

    def test_parameter_count_under_five_million_at_desk_defaults(self):
        for cfg in (
            ModelConfig(),
            ModelConfig(use_3d=True, camera_rotation=True, camera_embed=True),
        ):
            model = VqaModel(cfg, 60, 28, seed=0)
            assert model.parameter_count() < 5_000_000

    def test_enabled_pathways_get_gradients_disabled_get_none(self):
        cfg = small_cfg(use_3d=True, camera_rotation=True, camera_embed=True)
        model = VqaModel(cfg, 30, 28, seed=0)
        imgs, toks, cams = batch()
        ans = np.array([1, 2])
        opt = Adam([p for _, p in model.trainable_parameters()], lr=1e-3)
        # two steps move the zero-initialized heads off their saddle first
        for _ in range(2):
            loss = ad.softmax_cross_entropy(model(imgs, toks, cams), ans)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        loss = ad.softmax_cross_entropy(model(imgs, toks, cams), ans)
        model.zero_grad()
        ad.backward(loss)
        missing = [
            n
            for n, p in model.trainable_parameters()
            if p.grad is None or not np.any(p.grad)
        ]
        assert missing == []

    def test_frozen_postprocessor_receives_no_updates(self):
        cfg = small_cfg(use_3d=True, camera_rotation=True, freeze_postprocessor=True)
        model = VqaModel(cfg, 30, 28, seed=0)
        frozen_before = [
            p.data.copy() for m in (model.encoder, model.postproc) for p in m.parameters()
        ]
        imgs, toks, cams = batch()
        opt = Adam([p for _, p in model.trainable_parameters()], lr=1e-2)
        for _ in range(2):
            loss = ad.softmax_cross_entropy(model(imgs, toks, cams), np.array([1, 2]))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        frozen_after = [
            p.data for m in (model.encoder, model.postproc) for p in m.parameters()
        ]
        for before, after in zip(frozen_before, frozen_after):
            np.testing.assert_array_equal(before, after)
        # and at least one trainable parameter did move
        assert any(np.any(p.grad) for _, p in model.trainable_parameters())

    def test_gru_only_ignores_image(self):
        model = VqaModel(small_cfg(gru_only=True), 30, 28, seed=0)
        model.eval()
        imgs, toks, cams = batch()
        with ad.no_grad():
            a = model(imgs, toks, cams).data
            b = model(imgs * 0.0 + 1.0, toks, cams).data
        np.testing.assert_array_equal(a, b)

    def test_zeroing_camera_projection_restores_invariance(self):
        cfg = small_cfg(camera_embed=True)
        model = VqaModel(cfg, 30, 28, seed=0)
        model.camera_embed.fc1.w.data[...] = 0.0
        model.camera_embed.fc1.b.data[...] = 0.0
        model.eval()
        imgs, toks, cams = batch()
        with ad.no_grad():
            a = model(imgs, toks, cams).data
            b = model(imgs, toks, cams + 5.0).data
        np.testing.assert_array_equal(a, b)

    def test_film_resblock_conditioning_gradient_matches_fd(self):
        from mrtvqa.model import FilmResBlock

        rng = RNG(11)
        blk = FilmResBlock(3, 5, np.random.default_rng(3), dims=2, dtype=np.float64)
        blk.eval()
        f = random_tensor(rng, (2, 3, 4, 4), requires_grad=False)
        cond = random_tensor(rng, (2, 5), requires_grad=False)
        w = blk.gamma_gen.w
        rel = check_gradients(lambda w: ad.sum_all(ad.tanh(blk(f, cond))), [w])
        assert rel < 1e-4
