"""Minimal dense tensor with reverse-mode automatic differentiation.

Storage is float32, reductions accumulate in float64. Operations are recorded
on a per-thread tape while any input requires a gradient; :func:`backward`
walks the tape in reverse, writes ``.grad`` on every leaf that asked for one
and clears the tape.

Only scalar broadcasting is supported by the generic elementwise op. The few
layer-level broadcasts a conv net needs (per-channel bias, per-sample
embedding added to feature maps) are explicit ops.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float32

_state = threading.local()
_debug = os.environ.get("CDMSEG_DEBUG", "") not in ("", "0")


class TensorError(ValueError):
    """Raised for shape, domain and finiteness violations."""


def set_debug(flag: bool) -> None:
    """Enable the NaN/Inf sentinel after every op (off by default)."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


def _tape() -> list:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = []
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on this thread's tape."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Store and compute in float64 (process-wide). Meant for gradient checks,
    where float32 round-off swamps central differences."""
    global DTYPE
    prev = DTYPE
    DTYPE = np.float64
    try:
        yield
    finally:
        DTYPE = prev


def tape_length() -> int:
    return len(_tape())


def clear_tape() -> None:
    _tape().clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d <= 0 for d in arr.shape):
            raise TensorError(f"extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise TensorError("non-finite value at tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._is_leaf = True

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = object.__new__(cls)
        t.data = np.asarray(data, dtype=DTYPE, order="C")
        if _debug and not np.all(np.isfinite(t.data)):
            raise TensorError("non-finite value produced by op")
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._is_leaf = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("mul", elementwise("sub", self, other), -1.0)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _record(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(out_data, needs)
    if needs:
        _tape().append((out, tuple(inputs), backward_fn))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- elementwise


def elementwise(op_kind: str, a: Tensor, b) -> Tensor:
    """``a (op) b`` for op in add/sub/mul/div; ``b`` is a same-shape tensor or a scalar."""
    if op_kind not in ("add", "sub", "mul", "div"):
        raise TensorError(f"unknown elementwise op {op_kind!r}")
    if isinstance(b, Tensor):
        if b.shape != a.shape:
            raise TensorError(f"shape mismatch {a.shape} vs {b.shape}")
        bd = b.data
        inputs = (a, b)
    else:
        bd = DTYPE(b)
        inputs = (a,)
    ad = a.data
    if op_kind == "div" and _debug and np.any(bd == 0):
        raise TensorError("division by zero")

    if op_kind == "add":
        out = ad + bd
    elif op_kind == "sub":
        out = ad - bd
    elif op_kind == "mul":
        out = ad * bd
    else:
        out = ad / bd

    def back(g):
        if op_kind == "add":
            ga, gb = g, g
        elif op_kind == "sub":
            ga, gb = g, -g
        elif op_kind == "mul":
            ga, gb = g * bd, g * ad
        else:
            ga, gb = g / bd, -g * ad / (bd * bd)
        return (ga, gb) if len(inputs) == 2 else (ga,)

    return _record(out, inputs, back)


# -------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), back)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature vector along axis 1: x[N,C,...] + bias[C]."""
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise TensorError(f"bias shape {bias.shape} does not fit {x.shape}")
    expand = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))

    def back(g):
        return g, g.sum(axis=axes, dtype=np.float64).astype(DTYPE)

    return _record(x.data + bias.data.reshape(expand), (x, bias), back)


def add_channel_vector(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-sample, per-channel vector to feature maps: x[N,C,H,W] + v[N,C]."""
    if x.data.ndim != 4 or v.shape != x.shape[:2]:
        raise TensorError(f"vector shape {v.shape} does not fit {x.shape}")

    def back(g):
        return g, g.sum(axis=(2, 3), dtype=np.float64).astype(DTYPE)

    return _record(x.data + v.data[:, :, None, None], (x, v), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[N,I] @ weight[I,O] (+ bias[O])."""
    out = matmul(x, weight)
    return add_bias(out, bias) if bias is not None else out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def back(g):
        return (g.reshape(src),)

    return _record(x.data.reshape(tuple(shape)), (x,), back)


# -------------------------------------------------------------- convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 cross-correlation. x[N,C,H,W], kernel[F,C,k,k], bias[F]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise TensorError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    f, kc, k, k2 = kernel.shape
    if kc != c:
        raise TensorError(f"channel mismatch: input has {c}, kernel expects {kc}")
    if k != k2 or k % 2 == 0:
        raise TensorError("kernel must be square with odd extent")
    if bias is not None and bias.shape != (f,):
        raise TensorError(f"bias shape {bias.shape} != ({f},)")
    p = k // 2
    # channels-last im2col: cols[n,y,x,i,j,c] = xpad[n,y+i,x+j,c]
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=DTYPE)
    xp[:, p : p + h, p : p + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, k, k, c), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + h, j : j + w, :]
    cols = cols.reshape(n * h * w, k * k * c)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(f, k * k * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, f).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * w, f)
        gk = (g2.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2)
        gcols = (g2 @ wmat).reshape(n, h, w, k, k, c)
        gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + h, j : j + w, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, p : p + h, p : p + w, :].transpose(0, 3, 1, 2)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0, dtype=np.float64).astype(DTYPE))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, inputs, back)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2; H and W must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise TensorError("avg_pool2 needs even spatial extents")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * DTYPE(0.25),)

    return _record(out, (x,), back)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), back)


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool: [N,C,H,W] -> [N,C]."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64)

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(DTYPE),)

    return _record(out, (x,), back)


# ------------------------------------------------------ reductions/activations


def reduce_and_activate(op_kind: str, x: Tensor) -> Tensor:
    xd = x.data
    if op_kind == "sum":
        out = np.asarray(xd.sum(dtype=np.float64))

        def back(g):
            return (np.full(xd.shape, g, dtype=DTYPE),)

    elif op_kind == "mean":
        out = np.asarray(xd.mean(dtype=np.float64))

        def back(g):
            return (np.full(xd.shape, g / xd.size, dtype=DTYPE),)

    elif op_kind == "silu":
        sig = expit(xd)
        out = xd * sig

        def back(g):
            return (g * sig * (1.0 + xd * (1.0 - sig)),)

    elif op_kind == "relu":
        out = np.maximum(xd, 0)

        def back(g):
            return (g * (xd > 0),)

    elif op_kind == "log_softmax":
        if xd.ndim == 0 or xd.shape[-1] == 0:
            raise TensorError("log_softmax needs a nonempty last axis")
        x64 = xd.astype(np.float64)
        shifted = x64 - x64.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out = shifted - lse
        soft = np.exp(out)

        def back(g):
            g64 = g.astype(np.float64)
            return ((g64 - soft * g64.sum(axis=-1, keepdims=True)).astype(DTYPE),)

    else:
        raise TensorError(f"unknown reduction/activation {op_kind!r}")
    return _record(out, (x,), back)


def tsum(x: Tensor) -> Tensor:
    return reduce_and_activate("sum", x)


def mean(x: Tensor) -> Tensor:
    return reduce_and_activate("mean", x)


def silu(x: Tensor) -> Tensor:
    return reduce_and_activate("silu", x)


def relu(x: Tensor) -> Tensor:
    return reduce_and_activate("relu", x)


def log_softmax(x: Tensor) -> Tensor:
    return reduce_and_activate("log_softmax", x)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select x[i, index[i]] from a [N,K] tensor."""
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or index.shape != (x.shape[0],):
        raise TensorError("pick expects [N,K] input and N indices")
    rows = np.arange(x.shape[0])

    def back(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[rows, index] = g
        return (gx,)

    return _record(x.data[rows, index], (x,), back)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape()
    if not tape:
        raise TensorError("backward called on an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    try:
        for out, inputs, fn in reversed(tape):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                gi = np.asarray(gi, dtype=DTYPE)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._is_leaf:
                    leaves[key] = inp
    finally:
        tape.clear()
    for key, leaf in leaves.items():
        g = grads[key].reshape(leaf.shape)
        if _debug and not np.all(np.isfinite(g)):
            raise TensorError("non-finite gradient")
        leaf.grad = np.asarray(g, dtype=DTYPE, order="C")
