"""Reverse-mode automatic differentiation over dense n-dimensional arrays.

The engine is tape-based: executing an op while gradients are enabled appends
a node to the active ComputationRecord. ``backward(loss)`` replays the record
in reverse execution order, accumulates gradients into every reachable leaf
that requires them, and consumes the record.

Layout is row-major and dense. There is no general broadcasting; the only
sanctioned exceptions are the per-channel scale/shift of ``channel_affine``
and ``batch_norm``, and the per-row bias of ``linear``. Everything else must
reshape or expand explicitly, which keeps each gradient rule auditable.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the op's contract."""


class RecordStateError(RuntimeError):
    """backward() called without a live computation record."""


class Tensor:
    """Dense float array with optional gradient tracking.

    ``grad`` is populated (accumulated, never overwritten) on requires_grad
    leaves by ``backward``. Tensors produced by ops while taping are not
    leaves and never hold a persistent ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class OpNode:
    __slots__ = ("name", "inputs", "output", "grad_fn")

    def __init__(self, name, inputs, output, grad_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class ComputationRecord:
    """Ordered log of executed ops; replayed once in reverse by backward()."""

    def __init__(self):
        self.nodes = []

    def append(self, node):
        self.nodes.append(node)


_record = None
_grad_enabled = True


def active_record():
    return _record


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _accumulate_leaf(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def apply_op(name, inputs, out_data, grad_fn):
    """Create the output tensor of a custom op and tape it if needed.

    ``grad_fn(g)`` must return one ndarray (or None) per input, aligned
    positionally. Modules outside the engine (geometry, model) define their
    fused ops through this hook.
    """
    global _record
    taping = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=taping)
    if taping:
        out._leaf = False
        if _record is None:
            _record = ComputationRecord()
        _record.append(OpNode(name, tuple(inputs), out, grad_fn))
    return out


def backward(loss):
    """Populate gradients of all requires_grad leaves reachable from loss.

    Gradients ADD into existing .grad buffers, so separate backwards on L1
    and L2 sum exactly like one backward on L1+L2. The record is consumed.
    """
    global _record
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if _record is None or not _record.nodes:
        raise RecordStateError("no active computation record (consumed or never built)")
    record, _record = _record, None

    if loss._leaf:
        raise RecordStateError("loss is a leaf; it was not produced by the active record")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.grad_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._leaf:
                _accumulate_leaf(t, gi)
            elif id(t) in grads:
                grads[id(t)] += gi
            else:
                grads[id(t)] = gi


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    if isinstance(b, (int, float)):
        out = a.data + b
        return apply_op("add_scalar", [a], out, lambda g: (g,))
    _check_same_shape("add", a, b)
    return apply_op("add", [a, b], a.data + b.data, lambda g: (g, g))


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -b)
    _check_same_shape("sub", a, b)
    return apply_op("sub", [a, b], a.data - b.data, lambda g: (g, -g))


def neg(a):
    return apply_op("neg", [a], -a.data, lambda g: (-g,))


def mul(a, b):
    if isinstance(b, (int, float)):
        out = a.data * b
        return apply_op("mul_scalar", [a], out, lambda g: (g * b,))
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return apply_op("mul", [a, b], ad * bd, lambda g: (g * bd, g * ad))


def relu(a):
    mask = a.data > 0
    return apply_op("relu", [a], a.data * mask, lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.data)
    return apply_op("tanh", [a], out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return apply_op("sigmoid", [a], out, lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    out = a.data.reshape(shape)
    return apply_op("reshape", [a], out, lambda g: (g.reshape(old),))


def concat(tensors, axis):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op("concat", tensors, out, grad_fn)


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return apply_op("stack", tensors, out, grad_fn)


def sum_all(a):
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=True),)

    return apply_op("sum_all", [a], out, grad_fn)


def global_avg_pool(a, n_spatial):
    """Mean over the trailing n_spatial axes."""
    if n_spatial < 1 or n_spatial >= a.ndim:
        raise ShapeError(f"global_avg_pool: n_spatial={n_spatial} invalid for ndim={a.ndim}")
    axes = tuple(range(a.ndim - n_spatial, a.ndim))
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes)
    expand = out.shape + (1,) * n_spatial
    full = a.shape

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(expand), full) / count,)

    return apply_op("global_avg_pool", [a], out, grad_fn)


def global_max_pool(a, n_spatial):
    """Max over the trailing n_spatial axes; ties route gradient to the first
    maximum in row-major order."""
    if n_spatial < 1 or n_spatial >= a.ndim:
        raise ShapeError(f"global_max_pool: n_spatial={n_spatial} invalid for ndim={a.ndim}")
    lead = a.shape[: a.ndim - n_spatial]
    flat = a.data.reshape(lead + (-1,))
    am = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, am[..., None], g[..., None], axis=-1)
        return (gx.reshape(a.shape),)

    return apply_op("global_max_pool", [a], out, grad_fn)


def where_rows(mask, a, b):
    """Per-row select: out[i] = a[i] where mask[i] else b[i]. mask is a bool ndarray."""
    _check_same_shape("where_rows", a, b)
    m = np.asarray(mask, dtype=bool).reshape((-1,) + (1,) * (a.ndim - 1))

    def grad_fn(g):
        return (np.where(m, g, 0.0), np.where(m, 0.0, g))

    return apply_op("where_rows", [a, b], np.where(m, a.data, b.data), grad_fn)


# ---------------------------------------------------------------------------
# dense linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def grad_fn(g):
        return (g @ bd.T, ad.T @ g)

    return apply_op("matmul", [a, b], out, grad_fn)


def linear(x, w, b=None):
    """Affine map out = x @ w + b with the bias broadcast over rows."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        def grad_fn(g):
            return (g @ wd.T, xd.T @ g)

        return apply_op("linear", [x, w], out, grad_fn)

    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match output dim {w.shape[1]}")
    out = out + b.data

    def grad_fn(g):
        return (g @ wd.T, xd.T @ g, g.sum(axis=0))

    return apply_op("linear", [x, w, b], out, grad_fn)


def embedding(weight, indices):
    """Row lookup into weight (V, E); indices is an int ndarray."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(
            f"embedding: index out of range [0, {weight.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = weight.data[idx]

    def grad_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, g)
        return (gw,)

    return apply_op("embedding", [weight], out, grad_fn)


def channel_affine(x, gamma, beta, channel_axis=1):
    """Per-channel scale and shift: out[..., c, ...] = gamma[c]*x + beta[c].

    gamma/beta may be (C,) shared across the batch or (N, C) per-sample,
    the latter being the FILM case.
    """
    C = x.shape[channel_axis]
    per_sample = gamma.ndim == 2
    if per_sample:
        if gamma.shape != (x.shape[0], C) or beta.shape != gamma.shape:
            raise ShapeError(
                f"channel_affine: params {gamma.shape}/{beta.shape} do not match "
                f"input {x.shape} on axis {channel_axis}"
            )
        expand = gamma.shape + (1,) * (x.ndim - 2)
        reduce_axes = tuple(range(2, x.ndim))
    else:
        if gamma.shape != (C,) or beta.shape != (C,):
            raise ShapeError(
                f"channel_affine: params {gamma.shape}/{beta.shape} do not match "
                f"channel count {C}"
            )
        expand = (1,) * channel_axis + (C,) + (1,) * (x.ndim - channel_axis - 1)
        reduce_axes = tuple(i for i in range(x.ndim) if i != channel_axis)

    gd = gamma.data.reshape(expand)
    xd = x.data
    out = gd * xd + beta.data.reshape(expand)

    def grad_fn(g):
        gx = g * gd
        ggamma = (g * xd).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        return (gx, ggamma, gbeta)

    return apply_op("channel_affine", [x, gamma, beta], out, grad_fn)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits, targets):
    """Mean over the batch of -log softmax(logits)[target], max-stabilized."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    t = np.asarray(targets)
    N, K = logits.shape
    if t.shape != (N,):
        raise ShapeError(f"softmax_cross_entropy: targets shape {t.shape} != ({N},)")
    if t.size and (t.min() < 0 or t.max() >= K):
        raise IndexError(f"softmax_cross_entropy: target outside [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    rows = np.arange(N)
    loss = np.asarray(-np.log(p[rows, t] + 0.0).mean(), dtype=logits.dtype)

    def grad_fn(g):
        gl = p.copy()
        gl[rows, t] -= 1.0
        return (gl * (g / N),)

    return apply_op("softmax_cross_entropy", [logits], loss, grad_fn)


# ---------------------------------------------------------------------------
# convolutions (im2col + GEMM; the contract is value/gradient equality)


def _conv_out_size(n, k, stride, pad, what):
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"{what}: kernel {k} exceeds padded extent {n + 2 * pad}")
    if span % stride != 0:
        raise ValueError(
            f"{what}: non-integral output size (({n}+2*{pad}-{k})/{stride}+1)"
        )
    return span // stride + 1


def _im2col2d(xp, kh, kw, stride, Ho, Wo):
    N, C, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(N, C, kh, kw, Ho, Wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    return np.ascontiguousarray(view).reshape(N, C * kh * kw, Ho * Wo)


def conv2d(x, w, b, stride=1, pad=0):
    """Cross-correlation with zero padding; gradients w.r.t. x, w and b."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/kernel, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input channels {C} != kernel channels {Cw}")
    Ho = _conv_out_size(H, kh, stride, pad, "conv2d")
    Wo = _conv_out_size(W, kw, stride, pad, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col2d(xp, kh, kw, stride, Ho, Wo)
    wm = w.data.reshape(F, -1)
    out = np.matmul(wm, cols)
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(N, F, Ho, Wo)
    need_x, need_w = x.requires_grad, w.requires_grad

    def grad_fn(g):
        gl = g.reshape(N, F, Ho * Wo)
        gw = gb = gx = None
        if need_w:
            gw = np.matmul(gl, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            gb = gl.sum(axis=(0, 2)) if b is not None else None
        if need_x:
            gcols = np.matmul(wm.T, gl).reshape(N, C, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride
                    ] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        if b is not None:
            return (gx, gw, gb)
        return (gx, gw)

    inputs = [x, w] if b is None else [x, w, b]
    return apply_op("conv2d", inputs, out, grad_fn)


def _im2col3d(xp, kd, kh, kw, stride, Do, Ho, Wo):
    N, C, _, _, _ = xp.shape
    sn, sc, sd, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(N, C, kd, kh, kw, Do, Ho, Wo),
        strides=(sn, sc, sd, sh, sw, sd * stride, sh * stride, sw * stride),
    )
    return np.ascontiguousarray(view).reshape(N, C * kd * kh * kw, Do * Ho * Wo)


def conv3d(x, w, b, stride=1, pad=0):
    """3-d analogue of conv2d over (N, C, D, H, W) volumes."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-d input/kernel, got {x.shape} and {w.shape}")
    N, C, D, H, W = x.shape
    F, Cw, kd, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv3d: input channels {C} != kernel channels {Cw}")
    Do = _conv_out_size(D, kd, stride, pad, "conv3d")
    Ho = _conv_out_size(H, kh, stride, pad, "conv3d")
    Wo = _conv_out_size(W, kw, stride, pad, "conv3d")

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    cols = _im2col3d(xp, kd, kh, kw, stride, Do, Ho, Wo)
    wm = w.data.reshape(F, -1)
    out = np.matmul(wm, cols)
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(N, F, Do, Ho, Wo)
    need_x, need_w = x.requires_grad, w.requires_grad

    def grad_fn(g):
        gl = g.reshape(N, F, Do * Ho * Wo)
        gw = gb = gx = None
        if need_w:
            gw = np.matmul(gl, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            gb = gl.sum(axis=(0, 2)) if b is not None else None
        if need_x:
            gcols = np.matmul(wm.T, gl).reshape(N, C, kd, kh, kw, Do, Ho, Wo)
            gxp = np.zeros_like(xp)
            for a in range(kd):
                for i in range(kh):
                    for j in range(kw):
                        gxp[
                            :,
                            :,
                            a : a + stride * Do : stride,
                            i : i + stride * Ho : stride,
                            j : j + stride * Wo : stride,
                        ] += gcols[:, :, a, i, j]
            if pad:
                gx = gxp[:, :, pad : pad + D, pad : pad + H, pad : pad + W]
            else:
                gx = gxp
        if b is not None:
            return (gx, gw, gb)
        return (gx, gw)

    inputs = [x, w] if b is None else [x, w, b]
    return apply_op("conv3d", inputs, out, grad_fn)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    training,
    momentum=0.1,
    eps=1e-5,
    channel_axis=1,
):
    """Normalize over all axes except the channel axis.

    Train mode uses batch statistics and updates the running buffers in
    place (unbiased variance, torch convention); eval mode uses the running
    buffers. gamma/beta of None disables the learnable affine (the FILM
    blocks supply their own scale/shift).
    """
    C = x.shape[channel_axis]
    axes = tuple(i for i in range(x.ndim) if i != channel_axis)
    expand = (1,) * channel_axis + (C,) + (1,) * (x.ndim - channel_axis - 1)
    xd = x.data

    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm: train mode needs batch size >= 2")
        count = xd.size // C
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            unbiased = var * (count / max(count - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean.reshape(expand)) * ivar.reshape(expand)
        out = xhat
        if gamma is not None:
            out = gamma.data.reshape(expand) * xhat + beta.data.reshape(expand)

        def grad_fn(g):
            gxh = g if gamma is None else g * gamma.data.reshape(expand)
            s1 = gxh.sum(axis=axes).reshape(expand)
            s2 = (gxh * xhat).sum(axis=axes).reshape(expand)
            gx = (gxh - s1 / count - xhat * s2 / count) * ivar.reshape(expand)
            if gamma is None:
                return (gx,)
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            return (gx, ggamma, gbeta)

        inputs = [x] if gamma is None else [x, gamma, beta]
        return apply_op("batch_norm", inputs, out, grad_fn)

    ivar = 1.0 / np.sqrt(running_var + eps)
    xhat = (xd - running_mean.reshape(expand)) * ivar.reshape(expand)
    out = xhat
    if gamma is not None:
        out = gamma.data.reshape(expand) * xhat + beta.data.reshape(expand)

    def grad_fn(g):
        gx = (g if gamma is None else g * gamma.data.reshape(expand)) * ivar.reshape(expand)
        if gamma is None:
            return (gx,)
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        return (gx, ggamma, gbeta)

    inputs = [x] if gamma is None else [x, gamma, beta]
    return apply_op("batch_norm_eval", inputs, out, grad_fn)
