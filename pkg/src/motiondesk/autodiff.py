"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every differentiable op applied to tensors that
require gradients; :meth:`Tape.backward` replays the records in reverse
creation order exactly once, accumulating vector-Jacobian products in a
fixed order so gradients are bit-reproducible for identical inputs.

Design rules:

- forward values are plain ``np.ndarray`` living on :class:`Tensor.data`;
  ops preserve the input dtype (float32 for training, float64 for checks);
- ops accept tensors or raw arrays/scalars (lifted to constants);
- nothing records unless some input requires a gradient, so the same code
  path doubles as inference;
- parameters untouched by the loss get an explicit zero gradient.

The ``np_*`` helpers are the plain forward kernels, exported for fast
inference paths that bypass tensor wrapping.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# plain kernels


def np_gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-error-function GELU."""
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def np_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def np_layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gain + bias


def np_conv1d(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, padding: int
) -> np.ndarray:
    cols, _ = _im2col(x, w.shape[0], stride, padding)
    out = cols @ w.reshape(-1, w.shape[2])
    if b is not None:
        out = out + b
    return out


# ---------------------------------------------------------------------------
# tape machinery


class Tensor:
    """Array value plus autodiff bookkeeping."""

    __slots__ = ("data", "tape", "requires_grad", "grad", "_idx")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._idx: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only record of differentiable ops."""

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._leaves: list[Tensor] = []

    def leaf(self, data: np.ndarray) -> Tensor:
        """A gradient-carrying input (parameter or probed activation)."""
        t = Tensor(np.asarray(data), tape=self, requires_grad=True)
        self._leaves.append(t)
        return t

    def const(self, data: np.ndarray) -> Tensor:
        return Tensor(np.asarray(data), tape=self, requires_grad=False)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every gradient-carrying tensor of this tape.

        Visits records newest-first exactly once; leaves that never touched
        the loss get zeros of their own shape.
        """
        if loss.tape is not self:
            raise ValueError("loss does not belong to this tape")
        if loss.data.ndim != 0:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.data.dtype)}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.out), None)
            rec.out.grad = g
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not _wants_grad(inp):
                    continue
                gi = np.asarray(gi, dtype=inp.data.dtype)
                acc = grads.get(id(inp))
                grads[id(inp)] = gi if acc is None else acc + gi
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else g
        if loss.grad is None:
            loss.grad = np.asarray(1.0, dtype=loss.data.dtype)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._records.append(_Record(out, inputs, vjp))

    def __len__(self) -> int:
        return len(self._records)


def _wants_grad(t: Tensor) -> bool:
    # Gradient flows into leaves and into op outputs (chained records).
    return t.requires_grad or t._idx >= 0


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.requires_grad or t._idx >= 0:
            if t.tape is None:
                raise ValueError("gradient-carrying tensor has no tape")
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("inputs belong to different tapes")
    out = Tensor(data, tape=tape, requires_grad=False)
    if tape is not None:
        out._idx = len(tape._records)
        tape._record(out, tuple(inputs), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    data = a.data + b.data
    return _emit(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    data = a.data - b.data
    return _emit(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    data = a.data * b.data
    return _emit(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _as_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    raise TypeError("at least one operand must be a Tensor")


def matmul(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    data = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit(data, (a, b), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def vjp(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return _emit(x.data[index], (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    data = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.data.shape[axis] for t in xs]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        index = [slice(None)] * g.ndim
        outs = []
        for i in range(len(xs)):
            index[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(index)])
        return tuple(outs)

    return _emit(data, tuple(xs), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    data = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)

    return _emit(data, (table,), vjp)


def inject_rows(base: Tensor, rows: Tensor, positions: Sequence[tuple[int, int]]) -> Tensor:
    """Replace ``base[b, l]`` with ``rows[i]`` for each position ``(b, l)``.

    Used to splice projected visual embeddings over placeholder token rows.
    """
    bs = np.asarray([p[0] for p in positions], dtype=np.intp)
    ls = np.asarray([p[1] for p in positions], dtype=np.intp)
    if len(bs) != rows.data.shape[0]:
        raise ValueError("one row required per position")
    data = base.data.copy()
    data[bs, ls] = rows.data

    def vjp(g):
        gb = g.copy()
        gb[bs, ls] = 0.0
        return gb, g[bs, ls]

    return _emit(data, (base, rows), vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    xx = x.data

    def vjp(g):
        cdf = 0.5 * (1.0 + erf(xx * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xx * xx)
        return (g * (cdf + xx * pdf),)

    return _emit(np_gelu(xx), (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = np_softmax(x.data, axis=axis)

    def vjp(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _emit(y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def vjp(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = (gg - m1 - xhat * m2) * inv
        batch_axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=batch_axes)
        gbias = g.sum(axis=batch_axes)
        return gx.astype(x.dtype, copy=False), ggain, gbias

    return _emit(data.astype(x.dtype, copy=False), (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# convolution and resampling

def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    b, t, c = x.shape
    if padding:
        x = np.concatenate(
            [
                np.zeros((b, padding, c), dtype=x.dtype),
                x,
                np.zeros((b, padding, c), dtype=x.dtype),
            ],
            axis=1,
        )
    t_pad = x.shape[1]
    t_out = (t_pad - k) // stride + 1
    if t_out <= 0:
        raise ValueError(f"conv1d: {t} frames too short for kernel {k} stride {stride}")
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = x[:, idx, :].reshape(b, t_out, k * c)
    return cols, t_pad


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution: x (B, T, C) * w (K, C, F) -> (B, T_out, F)."""
    k, c, f = w.shape
    cols, t_pad = _im2col(x.data, k, stride, padding)
    data = cols @ w.data.reshape(k * c, f)
    inputs: tuple[Tensor, ...]
    if b is not None:
        data = data + b.data
        inputs = (x, w, b)
    else:
        inputs = (x, w)
    batch, t_in = x.data.shape[0], x.data.shape[1]
    t_out = cols.shape[1]

    def vjp(g):
        gcols = (g @ w.data.reshape(k * c, f).T).reshape(batch, t_out, k, c)
        gxp = np.zeros((batch, t_pad, c), dtype=x.dtype)
        for kk in range(k):
            gxp[:, kk : kk + stride * t_out : stride] += gcols[:, :, kk]
        gx = gxp[:, padding : padding + t_in] if padding else gxp
        gw = np.einsum("btm,btf->mf", cols, g).reshape(k, c, f)
        if b is not None:
            return gx, gw, g.sum(axis=(0, 1))
        return gx, gw

    return _emit(data, inputs, vjp)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each timestep ``factor`` times along axis 1."""
    data = np.repeat(x.data, factor, axis=1)
    b, t, c = x.data.shape

    def vjp(g):
        return (g.reshape(b, t, factor, c).sum(axis=2),)

    return _emit(data, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and losses


def reduce_sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(x.dtype, copy=False),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, shape).astype(x.dtype, copy=False),)

    return _emit(data, (x,), vjp)


def reduce_mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.shape[a] for a in axis]))
    else:
        count = x.shape[axis]
    s = reduce_sum(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def straight_through(x: Tensor, values: np.ndarray) -> Tensor:
    """Forward ``values``, backward identity into ``x``.

    The quantizer uses this to pass decoder gradients through the
    non-differentiable codebook lookup.
    """
    values = np.asarray(values, dtype=x.data.dtype)
    if values.shape != x.shape:
        raise ValueError(f"straight_through shapes differ: {values.shape} vs {x.shape}")
    return _emit(values, (x,), lambda g: (g,))


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is nonzero.

    ``logits`` is (..., V); ``targets`` and ``mask`` match the leading shape.
    Positions with zero mask contribute exactly zero loss and zero gradient.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=logits.data.dtype)
    x = logits.data
    m = np.max(x, axis=-1, keepdims=True)
    shifted = x - m
    lse = m[..., 0] + np.log(np.sum(np.exp(shifted), axis=-1))
    picked = np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]
    denom = max(float(mask.sum()), 1.0)
    data = np.asarray(((lse - picked) * mask).sum() / denom, dtype=x.dtype)

    def vjp(g):
        soft = np_softmax(x, axis=-1)
        idx = targets[..., None]
        np.put_along_axis(soft, idx, np.take_along_axis(soft, idx, axis=-1) - 1.0, axis=-1)
        return ((g * mask / denom)[..., None] * soft,)

    return _emit(data, (logits,), vjp)
