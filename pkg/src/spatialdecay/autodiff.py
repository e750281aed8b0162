"""Minimal dense-tensor engine with taped reverse-mode differentiation.

Tensors wrap contiguous numpy arrays and are treated as immutable. Every
operation is a module-level function; when a Tape is active the op appends
a record (inputs, output, backward closure) and `backward` replays the
records in reverse to accumulate gradients keyed by tensor identity.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while finite checks were enabled."""


_STATE = threading.local()


def _state():
    if not hasattr(_STATE, "tapes"):
        _STATE.tapes = []
        _STATE.finite_checks = True
    return _STATE


def finite_checks_enabled() -> bool:
    return _state().finite_checks


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf scanning (on by default)."""
    _state().finite_checks = bool(enabled)


class finite_checks:
    """Context manager that temporarily sets the finite-check flag."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.prev = True

    def __enter__(self):
        self.prev = finite_checks_enabled()
        set_finite_checks(self.enabled)
        return self

    def __exit__(self, *exc):
        set_finite_checks(self.prev)
        return False


class Tensor:
    """Immutable dense array. Construct from any array-like; copies input."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
        arr = np.array(arr, dtype=dtype, order="C", copy=True)
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: adopt a freshly allocated array without copying
        t = object.__new__(cls)
        if not isinstance(arr, np.ndarray) or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class _Record:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered op log. Use as a context manager around the differentiated region."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state().tapes.pop()
        return False


def _active_tape() -> Tape | None:
    tapes = _state().tapes
    return tapes[-1] if tapes else None


def first_nonfinite(tape: Tape) -> str | None:
    """Name of the earliest tape record whose output holds NaN/Inf, if any."""
    for rec in tape.records:
        if not np.all(np.isfinite(rec.output.data)):
            return rec.name
    return None


class Gradients:
    """Gradient lookup keyed by tensor identity."""

    def __init__(self, by_id: dict, tensors: dict):
        self._by_id = by_id
        self._tensors = tensors  # keeps referents alive so ids stay valid

    def get(self, t: Tensor, default=None):
        return self._by_id.get(id(t), default)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._by_id.get(id(t))
        if g is None:
            raise KeyError("no gradient recorded for tensor")
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id


def backward(loss: Tensor, tape: Tape) -> Gradients:
    """Reverse-replay `tape` from `loss`, returning gradients for leaf tensors.

    `loss` must be a single-element tensor produced under `tape`. Gradients of
    intermediate (op-produced) tensors are freed as soon as they are consumed;
    the result maps only leaves (tensors no record produced).
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(rec.output) for rec in tape.records}
    if id(loss) not in produced:
        raise ValueError("loss tensor was not produced under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g_out = grads.get(id(rec.output))
        if g_out is None:
            continue
        in_grads = rec.backward(g_out)
        for t, g in zip(rec.inputs, in_grads):
            if g is None:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + g
            else:
                grads[tid] = g
                tensors[tid] = t
        # an op's output cannot feed any earlier record, so its grad is final
        grads.pop(id(rec.output), None)
        tensors.pop(id(rec.output), None)
    return Gradients(grads, tensors)


def _emit(name: str, inputs: Sequence[Tensor], out: np.ndarray,
          backward_fn: Callable) -> Tensor:
    if _state().finite_checks and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"op '{name}' produced non-finite values")
    t = Tensor._wrap(out)
    tape = _active_tape()
    if tape is not None:
        tape.records.append(_Record(name, tuple(inputs), t, backward_fn))
    return t


def detach(x: Tensor) -> Tensor:
    """A new leaf tensor sharing x's values; gradients do not flow into x."""
    return Tensor._wrap(x.data)


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_broadcast(name: str, a: tuple, b: tuple) -> None:
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + a
    pb = (1,) * (n - len(b)) + b
    for da, db in zip(pa, pb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{name}: shapes {a} and {b} do not broadcast")


def _reduce_like(g: np.ndarray, shape: tuple) -> np.ndarray:
    # sum a broadcasted gradient back down to `shape`
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        return _reduce_like(g, a.shape), _reduce_like(g, b.shape)

    return _emit("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a.shape, b.shape)
    out = a.data - b.data

    def bwd(g):
        return _reduce_like(g, a.shape), _reduce_like(-g, b.shape)

    return _emit("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a.shape, b.shape)
    out = a.data * b.data

    def bwd(g):
        return _reduce_like(g * b.data, a.shape), _reduce_like(g * a.data, b.shape)

    return _emit("mul", (a, b), out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def bwd(g):
        return (g * c,)

    return _emit("scale", (x,), out, bwd)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data + float(c)

    def bwd(g):
        return (g,)

    return _emit("add_scalar", (x,), out, bwd)


def neg(x: Tensor) -> Tensor:
    out = -x.data

    def bwd(g):
        return (-g,)

    return _emit("neg", (x,), out, bwd)


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def bwd(g):
        return (g * np.sign(x.data),)

    return _emit("abs", (x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument only, so no overflow at either tail:
    # sigmoid(x) = 1/(1+t) if x >= 0 else t/(1+t), with t = exp(-|x|)
    t = np.abs(x.data)
    np.negative(t, out=t)
    np.exp(t, out=t)
    out = np.where(x.data >= 0, 1.0, t)
    t += 1.0
    out /= t

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (x,), out, bwd)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x) as one taped op; values match the two-op spelling."""
    t = np.abs(x.data)
    np.negative(t, out=t)
    np.exp(t, out=t)
    s = np.where(x.data >= 0, 1.0, t)
    t += 1.0
    s /= t
    out = x.data * s

    def bwd(g):
        # d/dx x*s = s + x*s*(1-s) = s*(1 + x - out)
        return (g * (s * (1.0 + x.data) - s * out),)

    return _emit("silu", (x,), out, bwd)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)), computed as min(x, 0) - log1p(exp(-|x|))."""
    out = np.minimum(x.data, 0.0) - np.log1p(np.exp(-np.abs(x.data)))

    def bwd(g):
        # d/dx log(sigmoid(x)) = sigmoid(-x)
        t = np.exp(-np.abs(x.data))
        return (g * np.where(x.data >= 0, t / (1.0 + t), 1.0 / (1.0 + t)),)

    return _emit("log_sigmoid", (x,), out, bwd)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _emit("exp", (x,), out, bwd)


def log(x: Tensor) -> Tensor:
    # domain violations surface through the finite-check policy, not warnings
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _emit("log", (x,), out, bwd)


def powc(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for a constant p (x must stay in the domain of the power)."""
    p = float(p)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = x.data ** p

    def bwd(g):
        return (g * p * x.data ** (p - 1.0),)

    return _emit("powc", (x,), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    _check_broadcast("matmul", a.shape[:-2], b.shape[:-2])

    if b.ndim == 2 and a.ndim > 2:
        # projection case: one flat GEMM instead of a stack of row-count-L
        # GEMMs, and a backward free of broadcast temporaries
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def bwd(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _emit("matmul", (a, b), out, bwd)

    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _reduce_like(ga, a.shape), _reduce_like(gb, b.shape)

    return _emit("matmul", (a, b), out, bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax_rows", (x,), out, bwd)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive feature pairs: for x split as [x1 | x2] along the
    last axis, out = [x1 cos - x2 sin | x2 cos + x1 sin].

    cos/sin are fixed position tables broadcastable to x[..., :m/2]; they are
    constants, not differentiated. The backward pass is the inverse rotation.
    """
    m = x.shape[-1]
    if m % 2 != 0:
        raise ShapeError(f"rope_rotate needs an even last dim, got {m}")
    if cos.shape != sin.shape:
        raise ShapeError(f"cos/sin tables differ: {cos.shape} vs {sin.shape}")
    q = m // 2
    x1 = x.data[..., :q]
    x2 = x.data[..., q:]
    try:
        np.broadcast_shapes(x1.shape, cos.shape)
    except ValueError as exc:
        raise ShapeError(f"tables {cos.shape} do not broadcast to "
                         f"{x1.shape}") from exc
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def bwd(g):
        g1 = g[..., :q]
        g2 = g[..., q:]
        return (np.concatenate([g1 * cos + g2 * sin,
                                g2 * cos - g1 * sin], axis=-1),)

    return _emit("rope_rotate", (x,), out, bwd)


def layer_norm_op(x: Tensor, scale: Tensor, shift: Tensor,
                  eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the elementwise affine."""
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"scale/shift must be [{d}], got {scale.shape} "
                         f"and {shift.shape}")
    mu = np.sum(x.data, axis=-1, keepdims=True) * (1.0 / d)
    xc = x.data - mu
    var = np.sum(xc * xc, axis=-1, keepdims=True) * (1.0 / d)
    inv = (var + eps) ** -0.5
    xn = xc * inv
    out = xn * scale.data + shift.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dshift = np.sum(g, axis=lead)
        dscale = np.sum(g * xn, axis=lead)
        dxn = g * scale.data
        dxc = dxn * inv
        dvar = np.sum(dxn * xc, axis=-1, keepdims=True) * (-0.5) \
            * (var + eps) ** -1.5
        dxc = dxc + (2.0 / d) * xc * dvar
        dmu = -np.sum(dxc, axis=-1, keepdims=True)
        return dxc + dmu * (1.0 / d), dscale, dshift

    return _emit("layer_norm", (x, scale, shift), out, bwd)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            shape = list(x.shape)
            for a in axes:
                shape[a] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("reduce_sum", (x,), out, bwd)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), np.ascontiguousarray(out), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(int(a) for a in np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _emit("transpose", (x,), out, bwd)


def narrow(x: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Slice `size` entries from `start` along one axis."""
    axis = axis % x.ndim
    if start < 0 or size < 1 or start + size > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + size}] out of range "
                         f"for axis {axis} of {x.shape}")
    sl = tuple(slice(start, start + size) if i == axis else slice(None)
               for i in range(x.ndim))
    out = np.ascontiguousarray(x.data[sl])

    def bwd(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[sl] = g
        return (gx,)

    return _emit("narrow", (x,), out, bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    axis = axis % parts[0].ndim
    base = list(parts[0].shape)
    for p in parts[1:]:
        s = list(p.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeError("concat: shapes differ off the concat axis")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def bwd(g):
        splits = np.cumsum(sizes[:-1])
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _emit("concat", tuple(parts), out, bwd)


# ---------------------------------------------------------------------------
# structured ops

def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 2D convolution with zero padding, preserving H and W.

    x: [B, H, W, D], kernel: [kh, kw, D] with odd kh, kw.
    """
    if x.ndim != 4 or kernel.ndim != 3:
        raise ShapeError("depthwise_conv2d expects x [B,H,W,D], kernel [kh,kw,D]")
    kh, kw, d = kernel.shape
    if d != x.shape[3]:
        raise ShapeError(f"depthwise_conv2d: channel mismatch {d} vs {x.shape[3]}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("depthwise_conv2d kernel dims must be odd")
    b, h, w, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros_like(x.data)
    for u in range(kh):
        for v in range(kw):
            out += xp[:, u:u + h, v:v + w, :] * kernel.data[u, v]

    def bwd(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros(kernel.shape, dtype=g.dtype)
        tmp = np.empty_like(g)
        for u in range(kh):
            for v in range(kw):
                np.multiply(g, kernel.data[u, v], out=tmp)
                gxp[:, u:u + h, v:v + w, :] += tmp
                gk[u, v] = np.einsum("bhwd,bhwd->d", xp[:, u:u + h, v:v + w, :], g)
        return gxp[:, ph:ph + h, pw:pw + w, :], gk

    return _emit("depthwise_conv2d", (x, kernel), out, bwd)


def pair_interval_sum(g: Tensor, bound: str) -> Tensor:
    """Pairwise interval sums of per-position values.

    g: [..., L, N]. Output o: [..., N, L, L] with
      bound="low":  o[..., n, i, j] = sum_{k=min(i,j)}^{max(i,j)-1} g[..., k, n]
      bound="high": o[..., n, i, j] = sum_{k=min(i,j)+1}^{max(i,j)} g[..., k, n]
    Either way o[..., n, i, i] = 0. Accumulation runs in ascending k so the
    result is bitwise equal to a naive ascending loop over the interval.
    """
    if bound not in ("low", "high"):
        raise ShapeError(f"pair_interval_sum: bad bound {bound!r}")
    if g.ndim < 2:
        raise ShapeError("pair_interval_sum expects [..., L, N]")
    *lead, ll, n = g.shape
    idx = np.arange(ll)
    lo = np.minimum.outer(idx, idx)
    hi = np.maximum.outer(idx, idx)

    # selectors are rebuilt per k: storing all L of them would cost O(L^3)
    def selector(k, dtype):
        if bound == "low":
            return ((lo <= k) & (k < hi)).astype(dtype)
        return ((lo < k) & (k <= hi)).astype(dtype)

    out = np.zeros((*lead, n, ll, ll), dtype=g.dtype)
    for k in range(ll):
        out += g.data[..., k, :][..., None, None] * selector(k, g.dtype)

    def bwd(gr):
        gg = np.zeros(g.shape, dtype=gr.dtype)
        for k in range(ll):
            gg[..., k, :] = np.sum(gr * selector(k, gr.dtype), axis=(-2, -1))
        return (gg,)

    return _emit("pair_interval_sum", (g,), out, bwd)
