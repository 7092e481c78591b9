"""Self-supervised pretraining of the 2D-to-3D volumetric encoder.

Positive pairs come from one of three augmentation policies:
  2d      one view, two independent stochastic 2D transforms
  3d      two distinct views of the same scene, untransformed
  2d+3d   two distinct views, each stochastically transformed
The temperature-scaled InfoNCE objective contrasts each pair against the
other scenes in the batch (in-batch negatives only). Nothing in this module
reads camera parameters: multi-view identity is the only supervision.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor, apply_op
from .layers import Module, Linear, Conv2d, Conv3d, BatchNorm
from .model import ConfigError, ConvBlock2d, lift_to_volume
from .optim import Adam
from .seeding import child_rng

POLICY_2D = "2d"
POLICY_3D = "3d"
POLICY_2D3D = "2d+3d"
POLICIES = (POLICY_2D, POLICY_3D, POLICY_2D3D)


@dataclass
class AugmentationPolicy:
    variant: str = POLICY_2D3D
    crop_scale: tuple = (0.5, 1.0)  # area fraction range; (1.0, 1.0) disables cropping
    flip_p: float = 0.5
    jitter: float = 0.2

    @property
    def uses_2d_ops(self):
        return self.variant in (POLICY_2D, POLICY_2D3D)

    @property
    def uses_views(self):
        return self.variant in (POLICY_3D, POLICY_2D3D)

    def stochastic(self):
        return self.crop_scale != (1.0, 1.0) or self.flip_p > 0 or self.jitter > 0

    def validate(self):
        if self.variant not in POLICIES:
            raise ConfigError(f"unknown augmentation variant {self.variant!r}")
        if self.variant == POLICY_2D and not self.stochastic():
            raise ConfigError(
                "2d policy with all transforms disabled would produce identical pairs"
            )
        return self


def bilinear_resize(img, out_h, out_w):
    """Resize (H, W, C) float image with align-corners bilinear interpolation."""
    H, W = img.shape[:2]
    if (H, W) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0, H - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, W - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = img[y0][:, x0]
    b = img[y0][:, x1]
    c = img[y1][:, x0]
    d = img[y1][:, x1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def augment_2d(image, rng, policy):
    """Stochastic crop / flip / color jitter; output dims equal input dims.

    image is float (H, W, 3) in [0, 1]; draws happen in a fixed order so a
    given rng state always produces the same transform.
    """
    H, W = image.shape[:2]
    out = image
    if policy.crop_scale != (1.0, 1.0):
        area = rng.uniform(policy.crop_scale[0], policy.crop_scale[1]) * H * W
        aspect = rng.uniform(3.0 / 4.0, 4.0 / 3.0)
        ch = int(round(np.sqrt(area / aspect)))
        cw = int(round(np.sqrt(area * aspect)))
        ch = min(max(ch, 8), H)
        cw = min(max(cw, 8), W)
        top = rng.integers(0, H - ch + 1)
        left = rng.integers(0, W - cw + 1)
        out = bilinear_resize(out[top : top + ch, left : left + cw], H, W)
    else:
        out = out.copy()
    if policy.flip_p > 0 and rng.random() < policy.flip_p:
        out = out[:, ::-1]
    if policy.jitter > 0:
        brightness = rng.uniform(-policy.jitter, policy.jitter, size=3)
        contrast = rng.uniform(-policy.jitter, policy.jitter, size=3)
        mean = out.mean(axis=(0, 1))
        out = (out - mean) * (1.0 + contrast) + mean + brightness
    return np.clip(out, 0.0, 1.0)


def sample_pair(views, policy, rng):
    """Draw a positive pair from one scene's stack of views (V, H, W, 3) u8."""
    n_views = len(views)
    if policy.uses_views:
        if n_views < 2:
            raise ValueError(f"policy {policy.variant!r} needs >= 2 views, scene has {n_views}")
        i = int(rng.integers(0, n_views))
        j = int(rng.integers(0, n_views - 1))
        if j >= i:
            j += 1
    else:
        i = j = int(rng.integers(0, n_views))
    a = views[i].astype(np.float32) / 255.0
    b = views[j].astype(np.float32) / 255.0
    if policy.uses_2d_ops:
        a = augment_2d(a, rng, policy)
        b = augment_2d(b, rng, policy)
    return a, b, (i, j)


class ViewBank:
    """Scene-id -> view images, deliberately holding no camera information.

    The contrastive stage trains from multi-view identity alone; keeping
    cameras out of this type makes that guarantee structural.
    """

    def __init__(self, scene_ids, images_per_scene):
        if len(scene_ids) != len(images_per_scene):
            raise ValueError("scene_ids and images_per_scene lengths differ")
        self.scene_ids = list(scene_ids)
        self.images = list(images_per_scene)

    def __len__(self):
        return len(self.scene_ids)

    def views(self, idx):
        return self.images[idx]


class VolumeEncoder(Module):
    """Images -> latent volumes: strided 2D conv blocks, a channel->depth
    reshape, then 3D conv blocks."""

    def __init__(self, c_vol=32, d_vol=8, seed=0, widths=(32, 64, 128), dtype=np.float32):
        super().__init__()
        rng = child_rng(seed, "volume-encoder-init")
        w1, w2, w3 = widths
        self.c_vol, self.d_vol = c_vol, d_vol
        self.b2d = [
            ConvBlock2d(3, w1, rng, stride=2, dtype=dtype),
            ConvBlock2d(w1, w2, rng, stride=2, dtype=dtype),
            ConvBlock2d(w2, w3, rng, stride=2, dtype=dtype),
        ]
        self.to_vol = Conv2d(w3, c_vol * d_vol, 3, rng, pad=1, dtype=dtype)
        self.bn_vol = BatchNorm(c_vol * d_vol, dtype=dtype)
        self.c3a = Conv3d(c_vol, c_vol, 3, rng, pad=1, dtype=dtype)
        self.bn3a = BatchNorm(c_vol, dtype=dtype)
        self.c3b = Conv3d(c_vol, c_vol, 3, rng, pad=1, dtype=dtype)

    def encode(self, images):
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=np.float32))
        h = images
        for blk in self.b2d:
            h = blk(h)
        h = ad.relu(self.bn_vol(self.to_vol(h)))
        vol = lift_to_volume(h, self.c_vol, self.d_vol)
        vol = ad.relu(self.bn3a(self.c3a(vol)))
        return self.c3b(vol)


def encode_z(volume, projection=None):
    """Flatten a latent volume to its vector code by average pooling.

    volume is (C, D, H, W) or batched (N, C, D, H, W); the optional
    projection head (off by default) maps the pooled vector through a
    linear layer.
    """
    z = ad.global_avg_pool(volume, 3)
    if projection is not None:
        z = projection(z)
    return z


def info_nce(z1, z2, tau=0.1):
    """Temperature-scaled contrastive loss over cosine similarities.

    Row i of each half is a positive pair; all other rows of the second half
    are its negatives. Returns the batch mean; fully differentiable.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ad.ShapeError(f"info_nce: embedding shapes {z1.shape} vs {z2.shape}")
    n = z1.shape[0]
    if n < 1:
        raise ValueError("info_nce: empty batch")
    a, b = z1.data, z2.data
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    for name, norms in (("z1", na), ("z2", nb)):
        bad = np.where(norms == 0)[0]
        if bad.size:
            raise FloatingPointError(f"info_nce: zero-norm embedding in {name} at row {bad[0]}")
    A = a / na[:, None]
    B = b / nb[:, None]
    S = (A @ B.T) / tau
    S -= S.max(axis=1, keepdims=True)
    E = np.exp(S)
    P = E / E.sum(axis=1, keepdims=True)
    loss = np.asarray(-np.log(P[np.arange(n), np.arange(n)]).mean(), dtype=a.dtype)

    def grad_fn(g):
        dS = P.copy()
        dS[np.arange(n), np.arange(n)] -= 1.0
        dS *= float(g) / (n * tau)
        dA = dS @ B
        dB = dS.T @ A
        # back through the row normalization x -> x/|x|
        ga = (dA - A * (dA * A).sum(axis=1, keepdims=True)) / na[:, None]
        gb = (dB - B * (dB * B).sum(axis=1, keepdims=True)) / nb[:, None]
        return (ga, gb)

    return apply_op("info_nce", [z1, z2], loss, grad_fn)


def nce_accuracy(z1, z2):
    """Fraction of rows whose nearest (cosine) row in z2 is the true positive.

    Ties break toward the lowest index.
    """
    a = z1.data if isinstance(z1, Tensor) else np.asarray(z1)
    b = z2.data if isinstance(z2, Tensor) else np.asarray(z2)
    n = a.shape[0]
    if n < 2:
        raise ValueError(f"nce_accuracy needs n >= 2, got {n}")
    A = a / np.linalg.norm(a, axis=1, keepdims=True)
    B = b / np.linalg.norm(b, axis=1, keepdims=True)
    pred = np.argmax(A @ B.T, axis=1)
    return float((pred == np.arange(n)).mean())


@dataclass
class PretrainResult:
    encoder: VolumeEncoder
    curve: list  # (epoch, train_loss, val_nce_accuracy)
    best_accuracy: float
    checkpoint_path: str | None


def _to_batch(images01):
    x = np.stack(images01).astype(np.float32)
    return Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)) * 2.0 - 1.0)


def _val_pairs(bank):
    """Deterministic cross-view validation pairs: first two sampled views."""
    a, b = [], []
    for idx in range(len(bank)):
        views = bank.views(idx)
        if len(views) < 2:
            raise ValueError("validation scenes need at least two views")
        i, j = (1, 2) if len(views) > 2 else (0, 1)
        a.append(views[i].astype(np.float32) / 255.0)
        b.append(views[j].astype(np.float32) / 255.0)
    return a, b


def validation_nce_accuracy(encoder, bank, batch=128):
    """NCE accuracy over fixed distinct-view pairs, in batches of distinct scenes."""
    a_all, b_all = _val_pairs(bank)
    n_batches = len(a_all) // batch
    if n_batches == 0:
        raise ConfigError(
            f"validation needs >= {batch} scenes for batch size {batch}, got {len(a_all)}"
        )
    accs = []
    with ad.no_grad():
        for bi in range(n_batches):
            sl = slice(bi * batch, (bi + 1) * batch)
            za = encode_z(encoder.encode(_to_batch(a_all[sl])))
            zb = encode_z(encoder.encode(_to_batch(b_all[sl])))
            accs.append(nce_accuracy(za, zb))
    return float(np.mean(accs))


def pretrain(
    train_bank,
    val_bank,
    policy,
    tau=0.1,
    batch=128,
    epochs=20,
    lr=3e-4,
    seed=0,
    out_dir=None,
    encoder=None,
    log=None,
):
    """Train the volume encoder with InfoNCE; returns the frozen encoder.

    Records validation NCE accuracy per epoch and, when out_dir is given,
    writes the best-accuracy checkpoint plus a CSV curve.
    """
    policy.validate()
    if len(train_bank) < batch:
        raise ConfigError(f"need >= {batch} training scenes, got {len(train_bank)}")
    if encoder is None:
        encoder = VolumeEncoder(seed=seed)
    opt = Adam([p for _, p in encoder.trainable_parameters()], lr=lr)
    curve = []
    best_acc = -1.0
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = str(out_dir / "contrastive_encoder.mrtc")

    n_scenes = len(train_bank)
    for epoch in range(1, epochs + 1):
        rng = child_rng(seed, f"contrastive/epoch{epoch}")
        order = rng.permutation(n_scenes)
        encoder.train()
        losses = []
        t0 = time.time()
        for bi in range(n_scenes // batch):
            idxs = order[bi * batch : (bi + 1) * batch]
            xs1, xs2 = [], []
            for si in idxs:
                a, b, _ = sample_pair(train_bank.views(si), policy, rng)
                xs1.append(a)
                xs2.append(b)
            z1 = encode_z(encoder.encode(_to_batch(xs1)))
            z2 = encode_z(encoder.encode(_to_batch(xs2)))
            loss = info_nce(z1, z2, tau=tau)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        encoder.eval()
        val_acc = validation_nce_accuracy(encoder, val_bank, batch=batch)
        curve.append((epoch, float(np.mean(losses)), val_acc))
        if log:
            log(
                f"[contrastive {policy.variant}] epoch {epoch}: "
                f"loss {np.mean(losses):.4f} val_nce_acc {val_acc:.4f} "
                f"({time.time() - t0:.1f}s)"
            )
        if val_acc > best_acc:
            best_acc = val_acc
            if ckpt_path:
                ckpt.save_module(
                    ckpt_path,
                    encoder,
                    sidecar={
                        "kind": "contrastive_encoder",
                        "c_vol": encoder.c_vol,
                        "d_vol": encoder.d_vol,
                        "policy": policy.variant,
                        "tau": tau,
                        "epoch": epoch,
                    },
                )
    if out_dir is not None:
        with open(out_dir / "nce_curve.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_nce_accuracy"])
            w.writerows(curve)
    encoder.eval()
    encoder.freeze()
    return PretrainResult(
        encoder=encoder, curve=curve, best_accuracy=best_acc, checkpoint_path=ckpt_path
    )
