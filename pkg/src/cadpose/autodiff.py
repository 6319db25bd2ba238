"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op executed while a Tape is active appends one record (output, inputs,
backward closure); execution order is a topological order, so reverse
accumulation over the records computes exact gradients with each node
visited once. Gradients sum over tensor reuse.

Single precision is the training default; gradient checks run the same ops
in float64 (dtype follows the inputs).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise AutodiffError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise AutodiffError("cannot wrap a Tensor in a Tensor")
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        # bare python floats default to single precision; numpy inputs keep theirs
        if self.data.dtype == np.float64 and dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            self.data = self.data.astype(np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, tuple(inputs), backward))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad of every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, bwd in reversed(tape._nodes):
        g = out.grad
        if g is None:
            continue
        grads = bwd(g)
        for t, gi in zip(inputs, grads):
            if gi is not None:
                _accumulate(t, gi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _shapes_err(op: str, *shapes) -> AutodiffError:
    return AutodiffError(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise _shapes_err("add", a.shape, b.shape)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise _shapes_err("mul", a.shape, b.shape)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    )


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or (a.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise _shapes_err("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise _shapes_err("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record(out, (a, b), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sin(a.data))
    return _record(out, (a,), lambda g: (g * np.cos(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# reductions / shape ops


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), bwd)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = Tensor(np.squeeze(m + np.log(s), axis=axis))

    def bwd(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _record(out, (a,), bwd)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis))
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.full_like(a.data, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy() / n,)

    return _record(out, (a,), bwd)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes))
    inv = np.argsort(axes)
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(xs), bwd)


def take(a, idx, axis: int = 0) -> Tensor:
    """Gather rows; backward scatter-adds (duplicate indices accumulate)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(np.take(a.data, idx, axis=axis))

    def bwd(g):
        buf = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(buf, idx, g)
        else:
            np.add.at(np.moveaxis(buf, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (buf,)

    return _record(out, (a,), bwd)


def layernorm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise _shapes_err("layernorm", a.shape, gain.shape, bias.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    n = a.shape[-1]

    def bwd(g):
        dgain = (g * xhat).sum(axis=tuple(range(g.ndim - 1)))
        dbias = g.sum(axis=tuple(range(g.ndim - 1)))
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _record(out, (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# dense / convolutional primitives


def linear(x, w, b=None) -> Tensor:
    """x @ w + b with x (..., Din), w (Din, Dout), b (Dout,)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _conv_cols_1d(x: np.ndarray, ksize: int, stride: int) -> np.ndarray:
    lout = (x.shape[0] - ksize) // stride + 1
    cols = np.empty((lout, ksize, x.shape[1]), dtype=x.dtype)
    for kk in range(ksize):
        cols[:, kk, :] = x[kk : kk + lout * stride : stride]
    return cols.reshape(lout, ksize * x.shape[1])


def conv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """1-D convolution, x (L, Cin), w (k, Cin, Cout), no padding."""
    x, w = as_tensor(x), as_tensor(w)
    k, cin, cout = w.shape
    if x.ndim != 2 or x.shape[1] != cin:
        raise _shapes_err("conv1d", x.shape, w.shape)
    if x.shape[0] < k:
        raise _shapes_err("conv1d", x.shape, w.shape)
    cols = _conv_cols_1d(x.data, k, stride)
    wmat = w.data.reshape(k * cin, cout)
    y = cols @ wmat
    out = Tensor(y if b is None else y + as_tensor(b).data)
    lout = y.shape[0]

    def bwd(g):
        dw = (cols.T @ g).reshape(w.shape)
        dcols = (g @ wmat.T).reshape(lout, k, cin)
        dx = np.zeros_like(x.data)
        for kk in range(k):
            dx[kk : kk + lout * stride : stride] += dcols[:, kk, :]
        db = None if b is None else g.sum(axis=0)
        return (dx, dw) if b is None else (dx, dw, db)

    inputs = (x, w) if b is None else (x, w, as_tensor(b))
    return _record(out, inputs, bwd)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, x (H, W, Cin), w (kh, kw, Cin, Cout), zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    kh, kw, cin, cout = w.shape
    if x.ndim != 3 or x.shape[2] != cin:
        raise _shapes_err("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    hout = (xp.shape[0] - kh) // stride + 1
    wout = (xp.shape[1] - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise _shapes_err("conv2d", x.shape, w.shape)
    cols = np.empty((hout, wout, kh * kw * cin), dtype=xp.dtype)
    i = 0
    for ky in range(kh):
        for kx in range(kw):
            cols[..., i * cin : (i + 1) * cin] = xp[
                ky : ky + hout * stride : stride, kx : kx + wout * stride : stride
            ]
            i += 1
    cols2 = cols.reshape(hout * wout, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    y = (cols2 @ wmat).reshape(hout, wout, cout)
    out = Tensor(y if b is None else y + as_tensor(b).data)

    def bwd(g):
        g2 = g.reshape(hout * wout, cout)
        dw = (cols2.T @ g2).reshape(w.shape)
        dcols = (g2 @ wmat.T).reshape(hout, wout, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for ky in range(kh):
            for kx in range(kw):
                dxp[ky : ky + hout * stride : stride, kx : kx + wout * stride : stride] += dcols[:, :, ky, kx]
        dx = dxp[pad : xp.shape[0] - pad, pad : xp.shape[1] - pad] if pad else dxp
        db = None if b is None else g2.sum(axis=0)
        return (dx, dw) if b is None else (dx, dw, db)

    inputs = (x, w) if b is None else (x, w, as_tensor(b))
    return _record(out, inputs, bwd)


def _bilinear_weights(n_in: int, n_out: int):
    """Corner-aligned source indices/weights for 1-D bilinear resampling."""
    if n_out == 1 or n_in == 1:
        lo = np.zeros(n_out, dtype=np.int64)
        return lo, lo.copy(), np.ones(n_out)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, n_in - 2)
    frac = src - lo
    return lo, lo + 1, 1.0 - frac


def bilinear_resize(data: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Plain-numpy corner-aligned bilinear resize of an (H,W,C) array."""
    y0, y1, wy = _bilinear_weights(data.shape[0], h_out)
    x0, x1, wx = _bilinear_weights(data.shape[1], w_out)
    top = data[y0][:, x0] * wx[None, :, None] + data[y0][:, x1] * (1 - wx)[None, :, None]
    bot = data[y1][:, x0] * wx[None, :, None] + data[y1][:, x1] * (1 - wx)[None, :, None]
    return top * wy[:, None, None] + bot * (1 - wy)[:, None, None]


def upsample_bilinear(x, factor: int) -> Tensor:
    """Corner-aligned bilinear upsampling of (H,W,C) by an integer factor."""
    x = as_tensor(x)
    h, w, c = x.shape
    h_out, w_out = h * factor, w * factor
    y0, y1, wy = _bilinear_weights(h, h_out)
    x0, x1, wx = _bilinear_weights(w, w_out)
    out = Tensor(bilinear_resize(x.data, h_out, w_out))

    def bwd(g):
        dx = np.zeros_like(x.data)
        gy = [g * (wy[:, None, None]), g * ((1 - wy)[:, None, None])]
        flat = dx.reshape(h * w, c)
        for ys, gpart in zip((y0, y1), gy):
            for xs, wxs in ((x0, wx), (x1, 1 - wx)):
                contrib = gpart * wxs[None, :, None]
                idx = (ys[:, None] * w + xs[None, :]).ravel()
                np.add.at(flat, idx, contrib.reshape(-1, c))
        return (dx,)

    return _record(out, (x,), bwd)


def upsample_nearest(x, factor: int) -> Tensor:
    """Nearest-neighbor upsampling; cheap exact backward (block sum)."""
    x = as_tensor(x)
    h, w, c = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, factor, axis=0), factor, axis=1))

    def bwd(g):
        return (g.reshape(h, factor, w, factor, c).sum(axis=(1, 3)),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# attention


def multi_head_attention(q, k, v, heads: int, wq, wk, wv, wo, bq=None, bk=None, bv=None, bo=None) -> Tensor:
    """Multi-head scaled dot-product attention over unbatched token matrices.

    q (Lq, Dq), k (Lk, Dk), v (Lk, Dv); the learned projections map into a
    model width D = wq.shape[1] split across heads; wo maps D to the output.
    """
    if heads < 1:
        raise AutodiffError("attention needs at least one head")
    d_model = as_tensor(wq).shape[1]
    if d_model % heads != 0:
        raise AutodiffError(f"model width {d_model} not divisible by {heads} heads")
    dh = d_model // heads
    qp = linear(q, wq, bq)
    kp = linear(k, wk, bk)
    vp = linear(v, wv, bv)
    lq, lk = qp.shape[0], kp.shape[0]

    def split(t, length):
        return transpose(reshape(t, (length, heads, dh)), (1, 0, 2))  # (h, L, dh)

    qh, kh, vh = split(qp, lq), split(kp, lk), split(vp, lk)
    logits = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))  # (h, Lq, Lk)
    attn = softmax(logits, axis=-1)
    ctx = matmul(attn, vh)  # (h, Lq, dh)
    merged = reshape(transpose(ctx, (1, 0, 2)), (lq, d_model))
    return linear(merged, wo, bo)


def attention_weights(q, k, heads: int, wq, wk, bq=None, bk=None) -> np.ndarray:
    """Per-head attention matrix (h, Lq, Lk) for inspection/tests (no grad)."""
    d_model = as_tensor(wq).shape[1]
    dh = d_model // heads
    qp = as_tensor(q).data @ as_tensor(wq).data + (0 if bq is None else as_tensor(bq).data)
    kp = as_tensor(k).data @ as_tensor(wk).data + (0 if bk is None else as_tensor(bk).data)
    qh = qp.reshape(-1, heads, dh).transpose(1, 0, 2)
    kh = kp.reshape(-1, heads, dh).transpose(1, 0, 2)
    logits = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
