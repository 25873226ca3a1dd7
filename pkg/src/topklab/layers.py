"""CNN building blocks with tape-registered derivatives.

All spatial ops accept either a single sample (c, h, w) or a batch
(n, c, h, w); single samples are promoted to a batch of one internally.
Convolution is cross-correlation (no kernel flip) and is implemented as
im2col + matmul so both forward and backward run through BLAS.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, TensorError, _emit, relu

__all__ = ["ConvParams", "BatchNormState", "conv2d", "maxpool2d", "avgpool2d",
           "linear", "batchnorm2d", "softmax_cross_entropy", "relu",
           "save_checkpoint", "load_checkpoint", "BN_EPS", "BN_MOMENTUM"]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ConvParams:
    weight: Tensor  # (out_c, in_c, kh, kw)
    bias: Tensor    # (out_c,)
    stride: int = 1
    padding: int = 0


def _batched(x: Tensor):
    if x.data.ndim == 3:
        return True, x.data[None]
    if x.data.ndim == 4:
        return False, x.data
    raise TensorError(f"expected (c,h,w) or (n,c,h,w) input, got {x.shape}")


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = xd.shape
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xd.shape[2], xd.shape[3]
    if kh > hp or kw > wp:
        raise TensorError("kernel larger than padded input")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise TensorError("non-integral output extent")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, oh*ow, c*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation plus bias, differentiable w.r.t. input, weight, bias."""
    squeeze, xd = _batched(x)
    w, b = p.weight, p.bias
    oc, ic, kh, kw = w.shape
    n, c, h, wdt = xd.shape
    if c != ic:
        raise TensorError(f"conv2d: input has {c} channels, kernel expects {ic}")
    stride, padding = int(p.stride), int(p.padding)
    cols, oh, ow = _im2col(xd, kh, kw, stride, padding)
    wmat = w.data.reshape(oc, ic * kh * kw)
    out = cols @ wmat.T + b.data  # (n, oh*ow, oc)
    out = out.transpose(0, 2, 1).reshape(n, oc, oh, ow)
    need_x = x.tape is not None
    need_w = w.tape is not None or b.tape is not None
    # capture plain arrays, not Tensors: a Tensor in the closure would cycle
    # back to the tape and keep every saved buffer alive until a gc pass
    wd, wshape = w.data, w.shape

    def vjp(g):
        gd = g.reshape(n, oc, oh, ow) if squeeze else g
        gflat = gd.reshape(n, oc, oh * ow).transpose(0, 2, 1)  # (n, ohw, oc)
        gw = gb = gx = None
        if need_w:
            gw = (gflat.reshape(-1, oc).T
                  @ cols.reshape(-1, ic * kh * kw)).reshape(wshape)
            gb = gflat.sum(axis=(0, 1))
        if need_x:
            if stride == 1 and kh == kw and padding <= kh - 1:
                # grad wrt input = full correlation with flipped kernels
                wflip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gcols, _, _ = _im2col(gd, kh, kw, 1, kh - 1 - padding)
                gx = (gcols @ wflip.reshape(ic, oc * kh * kw).T).transpose(0, 2, 1)
                gx = gx.reshape(n, ic, h, wdt)
            else:
                gx = _col2im(gflat @ wmat, (n, ic, h, wdt), kh, kw, stride, padding)
            if squeeze:
                gx = gx[0]
        return (gx, gw, gb)

    out_t = out[0] if squeeze else out
    return _emit("conv2d", (x, w, b), out_t, vjp)


def _col2im(cols: np.ndarray, xshape, kh, kw, stride, padding):
    """Scatter columns back to the input; general-stride fallback path."""
    n, c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, oh, ow, c, kh, kw)
    for di in range(kh):
        for dj in range(kw):
            out[:, :, di:di + stride * oh:stride, dj:dj + stride * ow:stride] += \
                cols6[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _pool_windows(xd: np.ndarray, window: int, stride: int):
    n, c, h, w = xd.shape
    if window > h or window > w:
        raise TensorError("pool window larger than input")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.reshape(n, c, oh, ow, window * window), oh, ow


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Per-window max; backward routes to the argmax (first index on ties)."""
    stride = window if stride is None else stride
    squeeze, xd = _batched(x)
    n, c, h, w = xd.shape
    win, oh, ow = _pool_windows(xd, window, stride)
    idx = win.argmax(axis=-1)  # numpy argmax is first-index on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    disjoint = stride >= window and h % stride == 0 and w % stride == 0

    def vjp(g):
        gd = (g.reshape(out.shape) if squeeze else g)
        if disjoint:
            # each input cell feeds at most one window: scatter by windows
            g6 = np.zeros(idx.shape + (window * window,), dtype=gd.dtype)
            np.put_along_axis(g6, idx[..., None], gd[..., None], axis=-1)
            g6 = g6.reshape(n, c, oh, ow, window, window)
            gx = np.zeros((n, c, h, w), dtype=gd.dtype)
            gx6 = gx.reshape(n, c, oh, stride, ow, stride)
            gx6[:, :, :, :window, :, :window] = g6.transpose(0, 1, 2, 4, 3, 5)
        else:
            gx = np.zeros((n, c, h, w), dtype=gd.dtype)
            ii, jj = np.divmod(idx, window)
            bi, ci, oi, oj = np.indices(idx.shape, sparse=True)
            np.add.at(gx, (bi, ci, oi * stride + ii, oj * stride + jj), gd)
        return ((gx[0] if squeeze else gx),)

    out_t = out[0] if squeeze else out
    return _emit("maxpool2d", (x,), out_t, vjp)


def avgpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    squeeze, xd = _batched(x)
    n, c, h, w = xd.shape
    win, oh, ow = _pool_windows(xd, window, stride)
    out = win.mean(axis=-1)
    inv = 1.0 / (window * window)

    def vjp(g):
        gd = (g.reshape(out.shape) if squeeze else g) * inv
        gx = np.zeros((n, c, h, w), dtype=gd.dtype)
        for di in range(window):
            for dj in range(window):
                gx[:, :, di:di + stride * oh:stride, dj:dj + stride * ow:stride] += gd
        return ((gx[0] if squeeze else gx),)

    out_t = out[0] if squeeze else out
    return _emit("avgpool2d", (x,), out_t, vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map; x is (features,) or (n, features)."""
    xd = x.data
    single = xd.ndim == 1
    xb = xd[None] if single else xd
    m, nf = weight.shape
    if xb.shape[1] != nf or bias.shape != (m,):
        raise TensorError(f"linear: shape mismatch x{x.shape} w{weight.shape} b{bias.shape}")
    out = xb @ weight.data.T + bias.data
    need_x = x.tape is not None
    need_w = weight.tape is not None or bias.tape is not None
    wd = weight.data  # array only; Tensor capture would cycle to the tape

    def vjp(g):
        gb2 = g[None] if single else g
        gx = gw = gbias = None
        if need_x:
            gx = gb2 @ wd
            gx = gx[0] if single else gx
        if need_w:
            gw = gb2.T @ xb
            gbias = gb2.sum(axis=0)
        return (gx, gw, gbias)

    return _emit("linear", (x, weight, bias), out[0] if single else out, vjp)


class BatchNormState:
    """Running statistics, updated in train mode only."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                train: bool) -> Tensor:
    squeeze, xd = _batched(x)
    n, c, h, w = xd.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise TensorError("batchnorm2d: gamma/beta must be per-channel")
    if train:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        state.running_mean = ((1 - BN_MOMENTUM) * state.running_mean
                              + BN_MOMENTUM * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - BN_MOMENTUM) * state.running_var
                             + BN_MOMENTUM * var).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xd - mean[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    need_gb = gamma.tape is not None or beta.tape is not None
    gammad = gamma.data  # array only; Tensor capture would cycle to the tape

    def vjp(g):
        gd = g.reshape(out.shape) if squeeze else g
        ggamma = (gd * xhat).sum(axis=(0, 2, 3)) if need_gb else None
        gbeta = gd.sum(axis=(0, 2, 3)) if need_gb else None
        gxhat = gd * gammad[:, None, None]
        if train:
            m = n * h * w
            gx = (inv_std[:, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[:, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[:, None, None]
            )
        else:
            gx = gxhat * inv_std[:, None, None]
        return ((gx[0] if squeeze else gx), ggamma, gbeta)

    return _emit("batchnorm2d", (x, gamma, beta), out[0] if squeeze else out, vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean -log softmax(logits)[label]; max-subtraction stabilized.

    logits: (n_classes,) with int label, or (n, n_classes) with label array.
    """
    ld = logits.data
    single = ld.ndim == 1
    lb = ld[None] if single else ld
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = lb.shape
    if labels.shape != (n,):
        raise TensorError("softmax_cross_entropy: label count mismatch")
    if labels.min() < 0 or labels.max() >= k:
        raise TensorError("softmax_cross_entropy: label out of range")
    shifted = lb - lb.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    losses = logz - shifted[np.arange(n), labels]
    loss = np.asarray(losses.mean(), dtype=lb.dtype).reshape(())
    probs = np.exp(shifted - logz[:, None])

    def vjp(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        gl *= float(g) / n
        return ((gl[0] if single else gl),)

    return _emit("softmax_cross_entropy", (logits,), loss, vjp)


# ---------------------------------------------------------------------------
# checkpoint format: named parameter dictionary

_CKPT_MAGIC = b"SSLM"


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    from .tensor import save_tensor
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(bytes([1]))
        f.write(struct.pack("<Q", len(params)))
        for name, t in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            save_tensor(f, t)


def load_checkpoint(path) -> dict[str, Tensor]:
    from .tensor import load_tensor
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise TensorError("bad checkpoint magic")
        if f.read(1)[0] != 1:
            raise TensorError("unsupported checkpoint version")
        count = struct.unpack("<Q", f.read(8))[0]
        params = {}
        for _ in range(count):
            nlen = struct.unpack("<H", f.read(2))[0]
            name = f.read(nlen).decode("utf-8")
            params[name] = load_tensor(f)
        return params
