"""Parameterized building blocks over the autodiff engine.

Weight init follows Normal(0, sqrt(2/fan_in)) with zero biases throughout;
GRU gate biases start at zero as well.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def he_init(rng, shape, fan_in, dtype, scale=1.0):
    std = scale * np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


class Module:
    """Minimal parameter container with deterministic traversal order."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix=""):
        """All parameter tensors, frozen ones included (they still checkpoint)."""
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix=name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{name}.{i}."))
                    elif isinstance(item, Tensor):
                        out.append((f"{name}.{i}", item))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def named_buffers(self, prefix=""):
        """Non-learnable state that still belongs in checkpoints (BN stats)."""
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                out.extend(val.named_buffers(prefix=name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_buffers(prefix=f"{name}.{i}."))
            elif isinstance(val, np.ndarray) and key.startswith("running_"):
                out.append((name, val))
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self):
        self._set_mode(True)

    def eval(self):
        self._set_mode(False)

    def _set_mode(self, flag):
        self.training = flag
        for val in vars(self).values():
            if isinstance(val, Module):
                val._set_mode(flag)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item._set_mode(flag)

    def freeze(self):
        """Detach all parameters from training: no grads, no optimizer updates."""
        for p in self.parameters():
            p.requires_grad = False


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, zero_init=False, init_scale=1.0):
        super().__init__()
        if zero_init:
            self.w = Tensor(np.zeros((d_in, d_out), dtype=dtype), requires_grad=True)
        else:
            self.w = he_init(rng, (d_in, d_out), d_in, dtype, scale=init_scale)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad=0, dtype=np.float32):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.w = he_init(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class Conv3d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad=0, dtype=np.float32):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.w = he_init(rng, (c_out, c_in, k, k, k), c_in * k**3, dtype)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.conv3d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class BatchNorm(Module):
    """Batch normalization for (N, C, ...) with running statistics.

    affine=False leaves the output normalized only; the FILM blocks use this
    and apply their own conditioning-driven scale/shift.
    """

    def __init__(self, channels, affine=True, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.affine = affine
        if affine:
            self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
            self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x):
        gamma = self.gamma if self.affine else None
        beta = self.beta if self.affine else None
        return ad.batch_norm(
            x,
            gamma,
            beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Embedding(Module):
    def __init__(self, n_tokens, dim, rng, dtype=np.float32):
        super().__init__()
        self.w = he_init(rng, (n_tokens, dim), n_tokens, dtype)

    def __call__(self, indices):
        return ad.embedding(self.w, indices)


class GRUCell(Module):
    """Gated recurrent cell: h' = (1-z)*h + z*n.

    r = sigmoid(x Wxr + h Whr + br)
    z = sigmoid(x Wxz + h Whz + bz)
    n = tanh(x Wxn + bin + r * (h Whn + bhn))
    """

    def __init__(self, d_in, d_hidden, rng, dtype=np.float32):
        super().__init__()
        if d_hidden < 1:
            raise ValueError(f"GRUCell: hidden size must be positive, got {d_hidden}")
        self.d_hidden = d_hidden

        def mat(din, dout):
            return he_init(rng, (din, dout), din, dtype)

        def vec():
            return Tensor(np.zeros(d_hidden, dtype=dtype), requires_grad=True)

        self.wxr, self.whr, self.br = mat(d_in, d_hidden), mat(d_hidden, d_hidden), vec()
        self.wxz, self.whz, self.bz = mat(d_in, d_hidden), mat(d_hidden, d_hidden), vec()
        self.wxn, self.bin_ = mat(d_in, d_hidden), vec()
        self.whn, self.bhn = mat(d_hidden, d_hidden), vec()

    def step(self, x, h):
        r = ad.sigmoid(ad.add(ad.linear(x, self.wxr, self.br), ad.matmul(h, self.whr)))
        z = ad.sigmoid(ad.add(ad.linear(x, self.wxz, self.bz), ad.matmul(h, self.whz)))
        n = ad.tanh(
            ad.add(ad.linear(x, self.wxn, self.bin_), ad.mul(r, ad.linear(h, self.whn, self.bhn)))
        )
        # (1-z)*h + z*n, written as h + z*(n-h) to avoid a ones constant
        return ad.add(h, ad.mul(z, ad.sub(n, h)))

    def initial_state(self, batch, dtype=np.float32):
        return Tensor(np.zeros((batch, self.d_hidden), dtype=dtype))


def gru_sequence(cells, embedded_steps, mask=None):
    """Run stacked GRU cells over a sequence of (N, E) embedding tensors.

    mask, when given, is a bool ndarray (N, T); masked-out steps leave the
    hidden state untouched in every layer, so trailing padding cannot alter
    the final embedding. Returns the last layer's final hidden state.
    """
    if not embedded_steps:
        raise ValueError("gru_sequence: empty sequence")
    batch = embedded_steps[0].shape[0]
    dtype = embedded_steps[0].dtype
    states = [cell.initial_state(batch, dtype=dtype) for cell in cells]
    for t, x_t in enumerate(embedded_steps):
        inp = x_t
        for li, cell in enumerate(cells):
            new_h = cell.step(inp, states[li])
            if mask is not None:
                new_h = ad.where_rows(mask[:, t], new_h, states[li])
            states[li] = new_h
            inp = new_h
    return states[-1]
