"""The VQA model family: 2D and volumetric FILM pipelines.

Dispatch, by configuration flags:
  2D:  image encoder -> FILM-modulated 2D residual blocks -> pool -> classify
  3D:  additionally lift features to a volume, optionally rigidly transform
       it with pose parameters predicted from the viewpoint camera, then run
       3D FILM blocks.
The camera can condition the pipeline two ways, independently toggled:
through an embedding concatenated to the question vector (camera_embed), or
through the predicted rigid transform (camera_rotation).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .layers import (
    Module,
    Linear,
    Conv2d,
    Conv3d,
    BatchNorm,
    Embedding,
    GRUCell,
    gru_sequence,
)
from .seeding import child_rng


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    use_3d: bool = False
    camera_embed: bool = False
    camera_rotation: bool = False
    n_resblocks: int = 4
    nf: int = 64
    rnn_dim: int = 128
    rnn_num_layers: int = 1
    with_coords: bool = True
    ncf: int | None = 32  # None: feed the six raw camera coordinates directly
    embed_dim: int = 32
    enc_channels: tuple = (32, 64, 64)
    vol_channels: int = 32
    vol_depth: int = 8
    nf3d: int = 32
    n_resblocks3d: int | None = None  # None: same as n_resblocks
    pp_mid: int = 64
    freeze_postprocessor: bool = False
    gru_only: bool = False
    image_size: int = 64

    def validate(self):
        if self.camera_rotation and not self.use_3d:
            raise ConfigError("camera_rotation requires use_3d")
        if self.image_size % 8 != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by encoder stride 8")
        if self.n_resblocks < 1:
            raise ConfigError("need at least one reasoning block")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "enc_channels" in d:
            d["enc_channels"] = tuple(d["enc_channels"])
        return cls(**d).validate()


@dataclass
class FilmParams:
    """Per-channel scale/shift for one modulated block."""

    gamma: Tensor
    beta: Tensor


def film_modulate(f, p):
    """out[:, c, ...] = gamma[c] * f[:, c, ...] + beta[c]."""
    return ad.channel_affine(f, p.gamma, p.beta)


def coord_channels(batch, spatial, dtype=np.float32):
    """Normalized [-1, 1] coordinate maps: (N, len(spatial), *spatial)."""
    axes = [
        np.linspace(-1.0, 1.0, n, dtype=dtype) if n > 1 else np.zeros(1, dtype=dtype)
        for n in spatial
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    stacked = np.stack(mesh[::-1], axis=0)  # (x, y[, z]) ordering
    out = np.broadcast_to(stacked[None], (batch,) + stacked.shape).copy()
    return Tensor(out.astype(dtype, copy=False))


class ConvBlock2d(Module):
    """conv-BN-ReLU; stride 2 uses a 4x4 kernel for an exact halving."""

    def __init__(self, c_in, c_out, rng, stride=1, dtype=np.float32):
        super().__init__()
        k = 4 if stride == 2 else 3
        self.conv = Conv2d(c_in, c_out, k, rng, stride=stride, pad=1, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype=dtype)

    def __call__(self, x):
        return ad.relu(self.bn(self.conv(x)))


class ImageEncoder2d(Module):
    """Trainable strided stack producing features at 1/8 input resolution."""

    def __init__(self, cfg, out_channels, rng, dtype=np.float32):
        super().__init__()
        c1, c2, c3 = cfg.enc_channels
        self.blocks = [
            ConvBlock2d(3, c1, rng, stride=2, dtype=dtype),
            ConvBlock2d(c1, c2, rng, stride=2, dtype=dtype),
            ConvBlock2d(c2, c3, rng, stride=2, dtype=dtype),
            ConvBlock2d(c3, out_channels, rng, stride=1, dtype=dtype),
        ]
        self.out_channels = out_channels

    def __call__(self, x):
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ConfigError(f"encoder input {x.shape[2]}x{x.shape[3]} not divisible by 8")
        for blk in self.blocks:
            x = blk(x)
        return x


def lift_to_volume(h, c_vol, d_vol):
    """Reshape (N, C, H, W) features into a (N, c_vol, d_vol, H, W) volume."""
    N, C, H, W = h.shape
    if c_vol * d_vol != C:
        raise ConfigError(
            f"channel/depth factorization mismatch: {C} channels != {c_vol} x {d_vol}"
        )
    return ad.reshape(h, (N, c_vol, d_vol, H, W))


class Postprocessor2dTo3d(Module):
    """Learnable 2D conv blocks followed by a channel->(channel, depth) reshape."""

    def __init__(self, c_in, c_vol, d_vol, rng, mid=64, dtype=np.float32):
        super().__init__()
        self.c_vol, self.d_vol = c_vol, d_vol
        self.block = ConvBlock2d(c_in, mid, rng, dtype=dtype)
        self.head = Conv2d(mid, c_vol * d_vol, 1, rng, dtype=dtype)

    def features_2d(self, h):
        return self.head(self.block(h))

    def __call__(self, h):
        return lift_to_volume(self.features_2d(h), self.c_vol, self.d_vol)


class CameraFilmEmbed(Module):
    """Small MLP from the six raw camera coordinates, or identity when ncf unset."""

    def __init__(self, ncf, rng, dtype=np.float32):
        super().__init__()
        self.ncf = ncf
        if ncf is not None:
            self.fc1 = Linear(6, ncf, rng, dtype=dtype)
            self.fc2 = Linear(ncf, ncf, rng, dtype=dtype)

    @property
    def out_dim(self):
        return self.ncf if self.ncf is not None else 6

    def __call__(self, c):
        if self.ncf is None:
            return c
        return self.fc2(ad.relu(self.fc1(c)))


class CameraRotEmbed(Module):
    """Camera -> six rigid-transform parameters.

    The final layer starts at zero so training begins from the identity
    transform; early random rotations would scramble the volume.
    """

    def __init__(self, rng, hidden=64, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(6, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, 6, rng, dtype=dtype, zero_init=True)

    def __call__(self, c):
        return self.fc2(ad.relu(self.fc1(c)))


class QuestionEncoder(Module):
    def __init__(self, vocab_size, cfg, rng, pad_index=0, dtype=np.float32):
        super().__init__()
        self.embed = Embedding(vocab_size, cfg.embed_dim, rng, dtype=dtype)
        self.cells = [
            GRUCell(cfg.embed_dim if i == 0 else cfg.rnn_dim, cfg.rnn_dim, rng, dtype=dtype)
            for i in range(cfg.rnn_num_layers)
        ]
        self.pad_index = pad_index

    def __call__(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise ValueError(f"question tokens must be (N, T) with T >= 1, got {tokens.shape}")
        mask = tokens != self.pad_index
        steps = [self.embed(tokens[:, t]) for t in range(tokens.shape[1])]
        return gru_sequence(self.cells, steps, mask=mask)


class FilmResBlock(Module):
    """conv -> BN (affine off) -> FILM -> ReLU, with a residual skip.

    with_coords prepends normalized coordinate channels before the conv.
    Separate linear heads emit a gamma delta (modulation starts near the
    identity scale) and beta.
    """

    def __init__(self, channels, cond_dim, rng, dims=2, with_coords=True, dtype=np.float32):
        super().__init__()
        self.dims = dims
        self.with_coords = with_coords
        self.channels = channels
        c_in = channels + (dims if with_coords else 0)
        conv_cls = Conv2d if dims == 2 else Conv3d
        self.conv = conv_cls(c_in, channels, 3, rng, pad=1, dtype=dtype)
        self.bn = BatchNorm(channels, affine=False, dtype=dtype)
        self.gamma_gen = Linear(cond_dim, channels, rng, dtype=dtype)
        self.beta_gen = Linear(cond_dim, channels, rng, dtype=dtype)

    def film_params(self, cond):
        gamma = ad.add(self.gamma_gen(cond), 1.0)
        beta = self.beta_gen(cond)
        return FilmParams(gamma=gamma, beta=beta)

    def __call__(self, f, cond):
        inp = f
        if self.with_coords:
            coords = coord_channels(f.shape[0], f.shape[2:], dtype=f.dtype)
            inp = ad.concat([f, coords], axis=1)
        h = self.bn(self.conv(inp))
        h = film_modulate(h, self.film_params(cond))
        h = ad.relu(h)
        return ad.add(f, h)


class Classifier(Module):
    def __init__(self, c_in, n_answers, rng, hidden=128, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(c_in, hidden, rng, dtype=dtype)
        # small logits at init keep the first epochs near the uniform loss
        self.fc2 = Linear(hidden, n_answers, rng, dtype=dtype, init_scale=0.1)

    def __call__(self, pooled):
        return self.fc2(ad.relu(self.fc1(pooled)))


class VqaModel(Module):
    """Full pipeline from image + question tokens + camera to answer logits.

    external_volume_encoder, when given, replaces the trainable 2D encoder
    and postprocessor on the 3D path (the contrastively pretrained, frozen
    encoder); it must expose encode(images) -> volume Tensor.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        question_vocab_size,
        n_answers,
        seed=0,
        pad_index=0,
        external_volume_encoder=None,
        dtype=np.float32,
    ):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        rng = child_rng(seed, "model-init")

        self.question_enc = QuestionEncoder(
            question_vocab_size, cfg, rng, pad_index=pad_index, dtype=dtype
        )
        cond_dim = cfg.rnn_dim
        if cfg.camera_embed:
            self.camera_embed = CameraFilmEmbed(cfg.ncf, rng, dtype=dtype)
            cond_dim += self.camera_embed.out_dim
        if cfg.camera_rotation:
            self.camera_rot = CameraRotEmbed(rng, dtype=dtype)

        self.external_encoder = external_volume_encoder
        self._frozen_stack = []
        if not cfg.gru_only:
            if cfg.use_3d:
                if external_volume_encoder is None:
                    self.encoder = ImageEncoder2d(cfg, cfg.enc_channels[-1], rng, dtype=dtype)
                    self.postproc = Postprocessor2dTo3d(
                        self.encoder.out_channels,
                        cfg.vol_channels,
                        cfg.vol_depth,
                        rng,
                        mid=cfg.pp_mid,
                        dtype=dtype,
                    )
                    if cfg.freeze_postprocessor:
                        # mirror of the frozen-after-random-init ablation: the whole
                        # image->volume stack keeps its initial weights
                        self.encoder.freeze()
                        self.postproc.freeze()
                        self._frozen_stack = [self.encoder, self.postproc]
                else:
                    self._frozen_stack = [external_volume_encoder]
            else:
                self.encoder = ImageEncoder2d(cfg, cfg.nf, rng, dtype=dtype)

        if not cfg.gru_only and cfg.use_3d:
            self.vol_proj = Conv3d(cfg.vol_channels, cfg.nf3d, 1, rng, dtype=dtype)

        blocks_dim = 3 if cfg.use_3d else 2
        width = cfg.nf3d if cfg.use_3d else cfg.nf
        n_blocks = (
            cfg.n_resblocks3d
            if (cfg.use_3d and cfg.n_resblocks3d is not None)
            else cfg.n_resblocks
        )
        self.blocks = [
            FilmResBlock(
                width, cond_dim, rng, dims=blocks_dim, with_coords=cfg.with_coords, dtype=dtype
            )
            for _ in range(n_blocks)
        ]
        self.classifier = Classifier(width, n_answers, rng, dtype=dtype)
        self._feature_width = width

    def _set_mode(self, flag):
        super()._set_mode(flag)
        for m in self._frozen_stack:
            if isinstance(m, Module):
                Module._set_mode(m, False)

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def condition_vector(self, e_gru, camera):
        if self.cfg.camera_embed:
            e_cam = self.camera_embed(camera)
            return ad.concat([e_gru, e_cam], axis=1)  # order fixed: [question, camera]
        return e_gru

    def compute_volume(self, images):
        if self.external_encoder is not None:
            return self.external_encoder.encode(images)
        return self.postproc(self.encoder(images))

    def __call__(self, images, tokens, camera):
        cfg = self.cfg
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        if not isinstance(camera, Tensor):
            camera = Tensor(np.asarray(camera, dtype=self.dtype))
        N = images.shape[0]

        e_gru = self.question_enc(tokens)
        cond = self.condition_vector(e_gru, camera)

        if cfg.gru_only:
            spatial = (4, 4, 4) if cfg.use_3d else (8, 8)
            f = Tensor(np.zeros((N, self._feature_width) + spatial, dtype=self.dtype))
        elif cfg.use_3d:
            vol = self.compute_volume(images)
            if cfg.camera_rotation:
                pose = self.camera_rot(camera)
                vol = geo.transform_volume(vol, pose)
            f = ad.relu(self.vol_proj(vol))
        else:
            f = self.encoder(images)

        for blk in self.blocks:
            f = blk(f, cond)
        # max pooling keeps "feature present somewhere" evidence that spatial
        # relation questions depend on; averaging dilutes it by the map area
        pooled = ad.global_max_pool(f, 3 if cfg.use_3d else 2)
        return self.classifier(pooled)
