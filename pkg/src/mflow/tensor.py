"""Dense NCHW arrays with reverse-mode differentiation.

Every differentiable operation appends one entry to the thread's
:class:`ComputationRecord` (operation kind, input node ids, output node id,
and a closure holding the saved activations). :func:`backward` walks the
record in reverse, so each node is visited exactly once and gradients of
tensors used several times accumulate additively.

Arrays are float32 for training; pass float64 data (and parameters) to run
the same graph in double precision for finite-difference checks.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckerboardRisk, NotScalar, ShapeMismatch

LEAKY_SLOPE = 0.2

_ids = itertools.count(1)
_local = threading.local()


@dataclass
class Entry:
    kind: str
    inputs: tuple["Tensor", ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.node_id for t in self.inputs)


class ComputationRecord:
    """Append-only, topologically ordered log of differentiable operations."""

    def __init__(self):
        self.entries: list[Entry] = []

    def append(self, entry: Entry) -> None:
        self.entries.append(entry)

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


def current_record() -> ComputationRecord:
    rec = getattr(_local, "record", None)
    if rec is None:
        rec = _local.record = ComputationRecord()
    return rec


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        current_record().append(Entry(kind, tuple(inputs), result.node_id, backward))
    return result


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise


def add(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y, x.dtype if isinstance(x, Tensor) else None)
    _check_broadcast(x.shape, y.shape)
    out = x.data + y.data
    return _record("add", out, (x, y), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y, x.dtype if isinstance(x, Tensor) else None)
    _check_broadcast(x.shape, y.shape)
    out = x.data - y.data
    return _record("sub", out, (x, y), lambda g: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)))


def mul(x, y) -> Tensor:
    x = _as_tensor(x)
    if not isinstance(y, Tensor):
        c = np.asarray(y, dtype=x.dtype)
        return _record("mul_scalar", x.data * c, (x,), lambda g: (g * c,))
    _check_broadcast(x.shape, y.shape)
    out = x.data * y.data
    return _record("mul", out, (x, y),
                   lambda g: (_unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)))


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeMismatch(f"shapes {a} and {b} do not broadcast") from exc


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def sum_all(x: Tensor) -> Tensor:
    return _record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _record("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return _record("relu", np.maximum(x.data, 0, dtype=x.dtype), (x,), lambda g: (g * (x.data > 0),))
    if kind == "leaky_relu":
        slope = np.asarray(LEAKY_SLOPE, dtype=x.dtype)
        out = np.where(x.data > 0, x.data, x.data * slope)
        return _record("leaky_relu", out, (x,), lambda g: (np.where(x.data > 0, g, g * slope),))
    if kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-x.data))
        return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x):
    return activation(x, "relu")


def leaky_relu(x):
    return activation(x, "leaky_relu")


def sigmoid(x):
    return activation(x, "sigmoid")


# ------------------------------------------------------------ convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Padded NCHW input -> (N, C*kh*kw, Ho*Wo) patch matrix (channel-major)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, :(ho - 1) * s + 1:s, :(wo - 1) * s + 1:s]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches into a padded array."""
    n, c, hp, wp = shape
    if s > 1 and kh % s == 0 and kw % s == 0:
        # polyphase: tap t*s + r of input row a lands on output row (a + t)*s + r,
        # so each phase accumulates contiguous shifted blocks, then one interleave
        qh, qw = kh // s, kw // s
        ph = cols.reshape(n, c, qh, s, qw, s, ho, wo)
        acc = np.zeros((n, c, s, s, ho + qh - 1, wo + qw - 1), dtype=cols.dtype)
        for t in range(qh):
            for u in range(qw):
                acc[..., t:t + ho, u:u + wo] += ph[:, :, t, :, u]
        hf, wf = (ho + qh - 1) * s, (wo + qw - 1) * s
        full = acc.transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hf, wf)
        if (hf, wf) == (hp, wp):
            return full
        out = np.zeros(shape, dtype=cols.dtype)
        out[:, :, :hf, :wf] = full
        return out
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + (ho - 1) * s + 1:s, j:j + (wo - 1) * s + 1:s] += cols[:, :, i, j]
    return out


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with ``weight`` of shape (Co, Ci, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch("conv2d expects NCHW input and 4-D weights")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeMismatch(f"input has {c} channels, weights expect {ci}")
    if stride < 1 or padding < 0:
        raise ShapeMismatch("stride must be >= 1 and padding >= 0")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel {kh}x{kw} does not fit a {h}x{w} input")
    if bias is not None and bias.shape != (co,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({co},)")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(co, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, co, ho, wo)

    def backward(g):
        gm = g.reshape(n, co, ho * wo)
        gw = np.einsum("nol,nkl->ok", gm, cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(np.matmul(wmat.T, gm), xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = gm.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("conv2d", out, inputs, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2,
                     padding: int = 0) -> Tensor:
    """Transposed convolution, weight shape (Ci, Co, kh, kw).

    Output size ``(H - 1) * s - 2p + k``. Kernels whose size is not a
    multiple of the stride are refused because they overlap unevenly
    (checkerboard artefacts).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch("conv_transpose2d expects NCHW input and 4-D weights")
    n, c, h, w = x.shape
    ci, co, kh, kw = weight.shape
    if ci != c:
        raise ShapeMismatch(f"input has {c} channels, weights expect {ci}")
    if kh % stride or kw % stride:
        raise CheckerboardRisk(f"kernel {kh}x{kw} is not divisible by stride {stride}")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeMismatch("padding removes the whole output")
    if bias is not None and bias.shape != (co,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({co},)")
    xm = x.data.reshape(n, ci, h * w)
    wmat = weight.data.reshape(ci, -1)
    full = _col2im(np.matmul(wmat.T, xm), (n, co, hf, wf), kh, kw, stride, h, w)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        cols = _im2col(_pad(g, padding), kh, kw, stride, h, w)
        gx = np.matmul(wmat, cols).reshape(n, ci, h, w) if x.requires_grad else None
        gw = np.einsum("nil,nkl->ik", xm, cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("conv_transpose2d", out, inputs, backward)


# ------------------------------------------------------------ normalization


def batch_norm(x: Tensor, gain: Tensor, shift: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization; train mode updates the running buffers in place."""
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeMismatch(f"gain/shift must have shape ({c},)")
    g4 = gain.data[None, :, None, None]
    b4 = shift.data[None, :, None, None]
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = xc * inv[None, :, None, None]
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            gx = None
            if x.requires_grad:
                gh = g * g4
                gx = inv[None, :, None, None] * (
                    gh - gh.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gh * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        mu = running_mean.astype(x.dtype)
        scale = gain.data * inv
        out = x.data * scale[None, :, None, None] + (shift.data - mu * scale)[None, :, None, None]

        def backward(g):
            xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
            return g * scale[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _record("batch_norm", out.astype(x.dtype, copy=False), (x, gain, shift), backward)

    out = (xhat * g4 + b4).astype(x.dtype)
    return _record("batch_norm", out, (x, gain, shift), backward)


# ------------------------------------------------------------ pooling / resampling


def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    """Linear 2x upsampling along ``axis`` (half-pixel centres, edge clamp)."""
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up1d_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def pool_resample(x: Tensor, kind: str) -> Tensor:
    n, c, h, w = x.shape
    if kind == "max_pool_2x2":
        if h % 2 or w % 2:
            raise ShapeMismatch(f"max pooling needs even spatial dims, got {h}x{w}")
        quads = [x.data[:, :, i::2, j::2] for i in (0, 1) for j in (0, 1)]
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

        def backward(g):
            # route to the first maximal element of each window
            gx = np.zeros(x.shape, dtype=g.dtype)
            taken = np.zeros(out.shape, dtype=bool)
            for (i, j), q in zip(((0, 0), (0, 1), (1, 0), (1, 1)), quads):
                hit = (q == out) & ~taken
                gx[:, :, i::2, j::2] = np.where(hit, g, 0)
                taken |= hit
            return (gx,)

        return _record("max_pool_2x2", out, (x,), backward)
    if kind == "bilinear_up_2x":
        out = _up1d(_up1d(x.data, 2), 3)
        return _record("bilinear_up_2x", out, (x,), lambda g: (_up1d_adjoint(_up1d_adjoint(g, 3), 2),))
    raise ValueError(f"unknown resampling kind {kind!r}")


def max_pool2x2(x):
    return pool_resample(x, "max_pool_2x2")


def upsample2x(x):
    return pool_resample(x, "bilinear_up_2x")


# ------------------------------------------------------------ reductions


def _max_backward(data: np.ndarray, axes, out: np.ndarray):
    # gradient goes to the first maximal element of each window
    moved = np.moveaxis(data, axes, tuple(range(-len(axes), 0)))
    flat = moved.reshape(moved.shape[:-len(axes)] + (-1,))
    arg = flat.argmax(axis=-1)

    def backward(g):
        gf = np.zeros(flat.shape, dtype=g.dtype)
        gs = g.reshape(arg.shape)
        np.put_along_axis(gf, arg[..., None], gs[..., None], axis=-1)
        return (np.moveaxis(gf.reshape(moved.shape), tuple(range(-len(axes), 0)), axes),)

    return backward


def reduce(x: Tensor, kind: str) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch("reduce expects an NCHW tensor")
    if kind == "gap_spatial":
        hw = x.shape[2] * x.shape[3]
        return _record(kind, x.data.mean(axis=(2, 3), keepdims=True), (x,),
                       lambda g: (np.broadcast_to(g / hw, x.shape).astype(x.dtype),))
    if kind == "gmp_spatial":
        out = x.data.max(axis=(2, 3), keepdims=True)
        return _record(kind, out, (x,), _max_backward(x.data, (2, 3), out))
    if kind == "avg_over_channels":
        c = x.shape[1]
        return _record(kind, x.data.mean(axis=1, keepdims=True), (x,),
                       lambda g: (np.broadcast_to(g / c, x.shape).astype(x.dtype),))
    if kind == "max_over_channels":
        out = x.data.max(axis=1, keepdims=True)
        return _record(kind, out, (x,), _max_backward(x.data, (1,), out))
    raise ValueError(f"unknown reduction {kind!r}")


# ------------------------------------------------------------ combination


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeMismatch(f"cannot concatenate {t.shape} with {ref} along axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def combine(x: Tensor, y: Tensor, kind: str) -> Tensor:
    if kind == "concat_channels":
        return concat([x, y], axis=1)
    if kind == "elementwise_mul_broadcast":
        return mul(x, y)
    if kind == "add":
        return add(x, y)
    raise ValueError(f"unknown combination {kind!r}")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on (N, Cin) rows with ``weight`` of shape (Cout, Cin)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"dense: input {x.shape} incompatible with weights {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch("dense: bias length must equal output width")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("dense", out, inputs, backward)


def dropout(x: Tensor, rate: float, training: bool, seed=None) -> Tensor:
    """Inverted dropout; ``seed`` may be an int or a ``numpy.random.Generator``."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ------------------------------------------------------------ reverse pass


def backward(loss: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Fill ``.grad`` of every leaf reached from ``loss``; return grads for ``params``.

    The thread's computation record is consumed (cleared) by the call.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    rec = current_record()
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = {e.output_id for e in rec.entries}
    for entry in reversed(rec.entries):
        g = grads.pop(entry.output_id, None)
        if g is None:
            continue
        for t, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi
            if t.node_id not in produced:
                leaves[t.node_id] = t
    for nid, t in leaves.items():
        g = grads[nid].astype(t.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g
    rec.clear()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
