"""Differentiable rigid 3D transformation of latent feature volumes.

Pipeline: six pose scalars -> 4x4 rigid matrix -> inverse-mapped sampling
grid -> trilinear resampling, with gradients flowing to both the volume and
the pose parameters.

Conventions (pinned; the pose parameters are learned, so any fixed choice
works as long as it is consistent):
  - rotation composition R = Rz(tz) @ Ry(ty) @ Rx(tx), translation applied
    after rotation (last matrix column);
  - normalized align-corners coordinates: voxel index 0 -> -1, index n-1 -> +1,
    which makes 90-degree rotations lattice-exact;
  - backward warping: each output voxel pulls from the inverse transform;
  - rotation center is the volume center (the normalized origin);
  - coordinates outside [-1, 1]^3 sample zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, apply_op


@dataclass
class RigidTransform:
    """4x4 (or batched Nx4x4) rigid matrix plus the pose it was built from."""

    matrix: Tensor
    params: Tensor  # (6,) or (N, 6): (tx_rot, ty_rot, tz_rot, tx, ty, tz)


@dataclass
class SamplingGrid:
    """Per-output-voxel source coordinates in normalized [-1, 1]^3 space.

    tensor has shape (N, D, H, W, 3) ordered (x, y, z) = (width, height, depth).
    """

    tensor: Tensor


def _single_axis(angles, axis):
    """Batched rotation matrices about one principal axis, plus derivative."""
    n = angles.shape[0]
    c, s = np.cos(angles), np.sin(angles)
    R = np.zeros((n, 3, 3), dtype=angles.dtype)
    dR = np.zeros_like(R)
    i, j = {"x": (1, 2), "y": (2, 0), "z": (0, 1)}[axis]
    k = 3 - i - j
    R[:, k, k] = 1.0
    R[:, i, i] = c
    R[:, j, j] = c
    R[:, i, j] = -s
    R[:, j, i] = s
    dR[:, i, i] = -s
    dR[:, j, j] = -s
    dR[:, i, j] = -c
    dR[:, j, i] = c
    return R, dR


def euler_pose_to_matrices(params):
    """Fused op: (N, 6) pose rows -> (N, 4, 4) rigid matrices.

    Analytic Jacobian: d(Rz Ry Rx)/dtheta_x = Rz Ry dRx, and cyclically; the
    translation column derivative is the identity.
    """
    p = params.data
    if p.ndim != 2 or p.shape[1] != 6:
        raise ad.ShapeError(f"euler_pose_to_matrices: expected (N, 6), got {params.shape}")
    n = p.shape[0]
    Rx, dRx = _single_axis(p[:, 0], "x")
    Ry, dRy = _single_axis(p[:, 1], "y")
    Rz, dRz = _single_axis(p[:, 2], "z")
    R = Rz @ Ry @ Rx
    M = np.zeros((n, 4, 4), dtype=p.dtype)
    M[:, :3, :3] = R
    M[:, :3, 3] = p[:, 3:]
    M[:, 3, 3] = 1.0

    def grad_fn(g):
        gR = g[:, :3, :3]
        gp = np.empty_like(p)
        gp[:, 0] = np.einsum("nij,nij->n", gR, Rz @ Ry @ dRx)
        gp[:, 1] = np.einsum("nij,nij->n", gR, Rz @ dRy @ Rx)
        gp[:, 2] = np.einsum("nij,nij->n", gR, dRz @ Ry @ Rx)
        gp[:, 3:] = g[:, :3, 3]
        return (gp,)

    return apply_op("euler_pose_to_matrices", [params], M, grad_fn)


def euler_to_matrix(tx_rot, ty_rot, tz_rot, tx, ty, tz):
    """Build a RigidTransform from six differentiable scalars."""
    parts = []
    for v in (tx_rot, ty_rot, tz_rot, tx, ty, tz):
        if not isinstance(v, Tensor):
            v = Tensor(np.asarray(v, dtype=np.float64))
        parts.append(ad.reshape(v, (1,)) if v.ndim == 0 else v)
    params = ad.reshape(ad.concat(parts, axis=0), (1, 6))
    return RigidTransform(matrix=euler_pose_to_matrices(params), params=params)


def rigid_inverse(matrix):
    """Invert rigid matrices exactly: [R | t] -> [R^T | -R^T t].

    Valid only on rigid inputs; along rigid-parameter curves the transpose
    rule's Jacobian coincides with the true inverse derivative.
    """
    M = matrix.data
    R = M[..., :3, :3]
    t = M[..., :3, 3]
    out = np.zeros_like(M)
    Rt = np.swapaxes(R, -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ki,...k->...i", R, t)
    out[..., 3, 3] = 1.0

    def grad_fn(g):
        gR_blk = g[..., :3, :3]
        gt_blk = g[..., :3, 3]
        gM = np.zeros_like(M)
        # through R^T
        gM[..., :3, :3] = np.swapaxes(gR_blk, -1, -2)
        # through -R^T t: d/dR[k,i] = -t[k] * g[i];  d/dt[k] = -(R g)[k]
        gM[..., :3, :3] += -np.einsum("...k,...i->...ki", t, gt_blk)
        gM[..., :3, 3] = -np.einsum("...ki,...i->...k", R, gt_blk)
        return (gM,)

    return apply_op("rigid_inverse", [matrix], out, grad_fn)


def normalized_lattice(dims, dtype=np.float64):
    """Canonical (D, H, W, 3) grid of align-corners normalized coordinates."""
    D, H, W = dims

    def axis(n):
        if n == 1:
            return np.zeros(1, dtype=dtype)
        return np.linspace(-1.0, 1.0, n, dtype=dtype)

    z, y, x = axis(D), axis(H), axis(W)
    out = np.empty((D, H, W, 3), dtype=dtype)
    out[..., 0] = x[None, None, :]
    out[..., 1] = y[None, :, None]
    out[..., 2] = z[:, None, None]
    return out


def affine_grid(transform, out_dims):
    """Sampling grid mapping each output voxel through the INVERSE transform.

    Backward warping: the grid stores where each output voxel reads from in
    the source volume, so content moves by the forward transform.
    """
    D, H, W = out_dims
    if D < 1 or H < 1 or W < 1:
        raise ValueError(f"affine_grid: output dims must be positive, got {out_dims}")
    inv = rigid_inverse(transform.matrix)
    lattice = normalized_lattice(out_dims, dtype=inv.dtype)

    A = inv.data[..., :3, :3]
    b = inv.data[..., :3, 3]
    if inv.ndim == 2:
        A, b = A[None], b[None]
    grid = np.einsum("nij,dhwj->ndhwi", A, lattice) + b[:, None, None, None, :]

    def grad_fn(g):
        gA = np.einsum("ndhwi,dhwj->nij", g, lattice)
        gb = g.sum(axis=(1, 2, 3))
        gM = np.zeros_like(inv.data)
        if inv.ndim == 2:
            gM[:3, :3] = gA[0]
            gM[:3, 3] = gb[0]
        else:
            gM[:, :3, :3] = gA
            gM[:, :3, 3] = gb
        return (gM,)

    return SamplingGrid(apply_op("affine_grid", [inv], grid, grad_fn))


def grid_sample_trilinear(volume, grid):
    """Trilinearly resample volume (N, C, D, H, W) at grid coordinates.

    Coordinates outside [-1, 1] read zero. Gradients flow to the volume
    values and to the grid coordinates (hence to transform parameters).
    """
    if isinstance(grid, SamplingGrid):
        grid = grid.tensor
    vd = volume.data
    gd = grid.data
    if np.isnan(gd).any():
        raise FloatingPointError("grid_sample_trilinear: NaN in sampling grid")
    N, C, D, H, W = vd.shape
    if gd.ndim != 5 or gd.shape[0] != N or gd.shape[4] != 3:
        raise ad.ShapeError(
            f"grid_sample_trilinear: grid shape {gd.shape} does not match volume {vd.shape}"
        )
    Do, Ho, Wo = gd.shape[1:4]
    L = Do * Ho * Wo

    def to_index(coord, n):
        if n == 1:
            return np.zeros_like(coord)
        return (coord + 1.0) * ((n - 1) / 2.0)

    u = to_index(gd[..., 0], W).reshape(N, L)
    v = to_index(gd[..., 1], H).reshape(N, L)
    w = to_index(gd[..., 2], D).reshape(N, L)

    u0, v0, w0 = np.floor(u), np.floor(v), np.floor(w)
    fu, fv, fw = u - u0, v - v0, w - w0
    u0, v0, w0 = u0.astype(np.int64), v0.astype(np.int64), w0.astype(np.int64)

    S = D * H * W
    # channel-major flat view: gathers and scatters become single fancy-index ops
    vol_cm = np.ascontiguousarray(vd.reshape(N, C, S).transpose(1, 0, 2)).reshape(C, N * S)
    sample_base = np.arange(N, dtype=np.int64)[:, None] * S
    out = np.zeros((C, N, L), dtype=vd.dtype)

    corners = []
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                iu, iv, iw = u0 + dx, v0 + dy, w0 + dz
                valid = (
                    (iu >= 0) & (iu < W) & (iv >= 0) & (iv < H) & (iw >= 0) & (iw < D)
                )
                wu = fu if dx else 1.0 - fu
                wv = fv if dy else 1.0 - fv
                ww = fw if dz else 1.0 - fw
                weight = wu * wv * ww * valid
                idx = (
                    np.clip(iw, 0, D - 1) * (H * W)
                    + np.clip(iv, 0, H - 1) * W
                    + np.clip(iu, 0, W - 1)
                )
                flat_idx = (sample_base + idx).ravel()
                vals = vol_cm[:, flat_idx].reshape(C, N, L)
                out += weight[None, :, :] * vals
                corners.append((dx, dy, dz, flat_idx, valid, weight, vals))

    out = np.ascontiguousarray(out.transpose(1, 0, 2)).reshape(N, C, Do, Ho, Wo)

    need_vol, need_grid = volume.requires_grad, grid.requires_grad

    def grad_fn(g):
        gl_cm = np.ascontiguousarray(
            g.reshape(N, C, L).transpose(1, 0, 2)
        )  # (C, N, L)
        gvol = ggrid = None
        if need_vol:
            gvol_cm = np.zeros((C, N * S), dtype=vd.dtype)
        if need_grid:
            ggrid = np.zeros((N, L, 3), dtype=gd.dtype)
        for dx, dy, dz, flat_idx, valid, weight, vals in corners:
            if need_vol:
                contrib = gl_cm * weight[None, :, :]
                np.add.at(gvol_cm, (slice(None), flat_idx), contrib.reshape(C, N * L))
            if need_grid:
                # d out / d (u, v, w) for this corner, as products of weight factors
                gv_dot = (gl_cm * vals).sum(axis=0) * valid  # (N, L)
                su = 1.0 if dx else -1.0
                sv = 1.0 if dy else -1.0
                sw = 1.0 if dz else -1.0
                wu = fu if dx else 1.0 - fu
                wv = fv if dy else 1.0 - fv
                ww = fw if dz else 1.0 - fw
                ggrid[..., 0] += gv_dot * su * wv * ww
                ggrid[..., 1] += gv_dot * wu * sv * ww
                ggrid[..., 2] += gv_dot * wu * wv * sw
        if need_vol:
            gvol = (
                gvol_cm.reshape(C, N, S).transpose(1, 0, 2).reshape(vd.shape).copy()
            )
        if need_grid:
            # chain through the normalized->index map
            ggrid[..., 0] *= (W - 1) / 2.0 if W > 1 else 0.0
            ggrid[..., 1] *= (H - 1) / 2.0 if H > 1 else 0.0
            ggrid[..., 2] *= (D - 1) / 2.0 if D > 1 else 0.0
            ggrid = ggrid.reshape(gd.shape)
        return (gvol, ggrid)

    return apply_op("grid_sample_trilinear", [volume, grid], out, grad_fn)


def transform_volume(volume, params):
    """Rigidly transform a feature volume, end-to-end differentiable.

    params is a Tensor of shape (6,) (one pose for the whole batch) or
    (N, 6) (per-sample poses).
    """
    if params.ndim == 1:
        params = ad.reshape(params, (1, 6))
    N = volume.shape[0]
    if params.shape[0] == 1 and N > 1:
        # one pose for all samples: grid is computed once then tiled
        pass
    elif params.shape[0] != N:
        raise ad.ShapeError(
            f"transform_volume: {params.shape[0]} poses for batch of {N}"
        )
    matrices = euler_pose_to_matrices(params)
    grid = affine_grid(RigidTransform(matrices, params), volume.shape[2:])
    gt = grid.tensor
    if gt.shape[0] == 1 and N > 1:
        tiled = np.broadcast_to(gt.data, (N,) + gt.shape[1:]).copy()

        def grad_fn(g):
            return (g.sum(axis=0, keepdims=True),)

        gt = apply_op("tile_grid", [gt], tiled, grad_fn)
    return grid_sample_trilinear(volume, gt)
