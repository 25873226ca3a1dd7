"""Dense tensors and tape-based reverse-mode autodiff.

Everything downstream (layers, sparsity, optimizers, image-space
optimization) runs on the primitives defined here. Values are immutable
numpy arrays wrapped in :class:`Tensor`; a :class:`Tape` records the
forward graph define-by-run style and `backward` replays it in reverse
node-id order, so gradient accumulation order is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# Toggled off only in tight inner loops that check their own outputs.
CHECK_FINITE = True

_DTYPES = {"f32": np.float32, "f64": np.float64}


class TensorError(ValueError):
    """Shape/dtype contract violation in a tensor op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf, which this engine treats as an error."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense n-d float array; the universal value type.

    A Tensor may be attached to a Tape (node >= 0), in which case ops
    consuming it are recorded for backward.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, dtype=None, _tape: "Tape | None" = None, _node: int = -1):
        self.data = _as_array(data, dtype)
        self.tape = _tape
        self.node = _node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, node={self.node})"


@dataclass
class Node:
    op: str
    parents: tuple
    # maps upstream grad -> tuple of grads aligned with parents (None = no grad)
    vjp: Optional[Callable]
    shape: tuple


class Tape:
    """Ordered op records for one forward pass; single-owner, not shared."""

    def __init__(self):
        self.nodes: list[Node] = []

    def watch(self, t: Tensor) -> Tensor:
        """Register a leaf whose gradient we want."""
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, t.shape))
        return Tensor(t.data, _tape=self, _node=nid)

    def record(self, op: str, parents: Sequence[Tensor], value: np.ndarray,
               vjp: Callable) -> Tensor:
        if CHECK_FINITE and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite output from op '{op}'")
        pids = tuple(p.node if (p.tape is self) else -1 for p in parents)
        nid = len(self.nodes)
        self.nodes.append(Node(op, pids, vjp, value.shape))
        return Tensor(value, _tape=self, _node=nid)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise TensorError("inputs recorded on different tapes")
            tape = t.tape
    return tape


def _emit(op: str, parents, value: np.ndarray, vjp) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        if CHECK_FINITE and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite output from op '{op}'")
        return Tensor(value)
    return tape.record(op, parents, value, vjp)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _emit("relu", (a,), a.data * keep, lambda g: (g * keep,))


def absval(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * sgn,))


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return _emit("scale", (a,), a.data * alpha, lambda g: (g * alpha,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


# ---------------------------------------------------------------------------
# shape / reduction / linear algebra

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape),
                 lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise TensorError("transpose: expects a matrix")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd,
                 lambda g: (g @ bd.T, ad.T @ g))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(()),
                 lambda g: (np.broadcast_to(g, shape).astype(a.data.dtype),))


# ---------------------------------------------------------------------------
# backward

def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse pass; returns {node_id: grad ndarray} for reached nodes.

    Nodes not reachable from the loss simply have no entry (treated as
    zero by `grad_of`).
    """
    if loss.tape is not tape:
        raise TensorError("loss is not recorded on this tape")
    if loss.shape != ():
        raise TensorError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=loss.data.dtype)}
    for nid in range(loss.node, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pid < 0 or pg is None:
                continue
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    return grads


def grad_of(grads: dict, t: Tensor) -> np.ndarray:
    """Gradient for a watched tensor; zeros if unreachable from the loss."""
    g = grads.get(t.node)
    if g is None:
        return np.zeros(t.shape, dtype=t.data.dtype)
    return np.asarray(g, dtype=t.data.dtype).reshape(t.shape)


# ---------------------------------------------------------------------------
# finite differences (test oracle)

def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.astype(np.float64).copy()
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    oflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base.copy())))
        flat[i] = orig - eps
        fm = float(f(Tensor(base.copy())))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("non-finite function value during finite differences")
        oflat[i] = (fp - fm) / (2.0 * eps)
    return out


# ---------------------------------------------------------------------------
# binary tensor file format

_MAGIC = b"SSLT"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.float32, 1: np.float64}


def save_tensor(f, t: Tensor) -> None:
    """Write one tensor: magic, version, dtype code, rank, extents, raw scalars."""
    import struct
    arr = t.data
    f.write(_MAGIC)
    f.write(bytes([1, _DTYPE_CODES[arr.dtype], arr.ndim]))
    for ext in arr.shape:
        f.write(struct.pack("<Q", ext))
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def load_tensor(f) -> Tensor:
    import struct
    magic = f.read(4)
    if magic != _MAGIC:
        raise TensorError(f"bad tensor magic {magic!r}")
    version, code, rank = f.read(1)[0], f.read(1)[0], f.read(1)[0]
    if version != 1:
        raise TensorError(f"unsupported tensor format version {version}")
    if code not in _CODE_DTYPES:
        raise TensorError(f"unknown dtype code {code}")
    shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
    dtype = np.dtype(_CODE_DTYPES[code]).newbyteorder("<")
    n = int(np.prod(shape)) if shape else 1
    buf = f.read(n * dtype.itemsize)
    arr = np.frombuffer(buf, dtype=dtype).reshape(shape).astype(_CODE_DTYPES[code])
    return Tensor(arr)
