"""Channel-wise spatial Top-K sparsification and its subgradient.

The operator keeps, in every channel, the K spatial responses of largest
absolute value and zeroes the rest. The mean-replacement variant instead
writes the mean of the kept responses at every kept position. Selection
is normalized to exactly K entries per channel: among equal absolute
values at the threshold the lower row-major index wins, which keeps the
exact-K sparsity invariant and makes results deterministic.

Backward treats the selection mask as locally constant (a valid
subgradient of this piecewise-linear map): gradients of non-selected
positions are zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, TensorError, NonFiniteError, _emit

VARIANTS = ("hard", "mean_replacement")


@dataclass(frozen=True)
class TopKConfig:
    fraction: float
    variant: str = "hard"
    # tie policy is fixed: first row-major index wins

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


def resolve_k(fraction: float, h: int, w: int) -> int:
    """Number of kept positions for a h*w channel plane: ceil, floor of one."""
    if h * w < 1:
        raise ValueError("empty plane")
    return min(h * w, max(1, math.ceil(fraction * h * w)))


def _select_mask(planes: np.ndarray, k: int) -> np.ndarray:
    """Exactly-k binary mask per flattened plane, largest |value| first.

    planes: (..., m) flattened spatial. Stable argsort on -|x| gives the
    first-index tie-break for free.
    """
    m = planes.shape[-1]
    if not (1 <= k <= m):
        raise ValueError(f"k={k} out of range for plane of {m} positions")
    order = np.argsort(-np.abs(planes), axis=-1, kind="stable")
    mask = np.zeros(planes.shape, dtype=planes.dtype)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def topk_select(plane: Tensor, k: int) -> Tensor:
    """Binary mask marking the k largest-|value| entries of one (h, w) plane."""
    pd = plane.data
    if pd.ndim != 2:
        raise TensorError(f"topk_select expects (h, w), got {plane.shape}")
    return Tensor(_select_mask(pd.reshape(1, -1), k).reshape(pd.shape))


def topk_forward(x: Tensor, cfg: TopKConfig) -> tuple[Tensor, Tensor]:
    """Apply the Top-K operator to (c, h, w) or (n, c, h, w) activations.

    Returns (output, mask). The output is tape-registered; the mask is a
    plain value (constant for backward purposes).
    """
    xd = x.data
    if xd.ndim not in (3, 4):
        raise TensorError(f"topk_forward expects (c,h,w) or (n,c,h,w), got {x.shape}")
    if not np.all(np.isfinite(xd)):
        raise NonFiniteError("topk_forward: non-finite input")
    h, w = xd.shape[-2], xd.shape[-1]
    k = resolve_k(cfg.fraction, h, w)
    flat = xd.reshape(xd.shape[:-2] + (h * w,))
    mask = _select_mask(flat, k)

    if cfg.variant == "hard":
        out = flat * mask
    else:
        means = (flat * mask).sum(axis=-1, keepdims=True) / k
        out = mask * means
    out = out.reshape(xd.shape)
    mask_nd = mask.reshape(xd.shape)

    def vjp(g):
        return (topk_vjp_array(mask_nd, cfg.variant, g.reshape(xd.shape), k),)

    return _emit("topk", (x,), out, vjp), Tensor(mask_nd)


def topk_vjp_array(mask: np.ndarray, variant: str, upstream: np.ndarray, k: int) -> np.ndarray:
    if mask.shape != upstream.shape:
        raise TensorError("topk_vjp: mask/upstream shape mismatch")
    if variant == "hard":
        return upstream * mask
    # mean replacement: each selected position gets the mean of the
    # upstream over the selected set in its channel
    mf = mask.reshape(mask.shape[:-2] + (-1,))
    uf = upstream.reshape(mask.shape[:-2] + (-1,))
    fan = (uf * mf).sum(axis=-1, keepdims=True) / k
    return (mf * fan).reshape(mask.shape)


def topk_vjp(mask: Tensor, variant: str, upstream: Tensor) -> Tensor:
    """Subgradient of the Top-K operator given its forward-pass mask."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    md = mask.data
    k = int(round(md.reshape(md.shape[:-2] + (-1,))[..., :].sum(axis=-1).flat[0]))
    return Tensor(topk_vjp_array(md, variant, upstream.data, k))


def mask_per_channel_count(mask: Tensor) -> np.ndarray:
    """Ones per channel plane; every entry equals K for a valid mask."""
    md = mask.data
    return md.reshape(md.shape[:-2] + (-1,)).sum(axis=-1)
