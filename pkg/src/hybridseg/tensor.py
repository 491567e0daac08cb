"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a NumPy float64 array (row-major). While a Tape is active,
differentiable operations append themselves to it in execution order, which
is topological by construction; ``backward`` replays the record in reverse
and accumulates gradients into the participating tensors.

The tape is strictly single-threaded: one tape is active at a time and
recording onto a consumed tape is an error. Tensors that never touch a tape
are plain immutable values and safe to share across threads.

Non-finite values (NaN/Inf) are treated as an error surface: every operation
validates its result and raises NonFiniteError instead of propagating them.
"""

from __future__ import annotations

import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NonFiniteError(ArithmeticError):
    """An operation produced (or was handed) NaN or Inf values."""


class TapeError(RuntimeError):
    """Tape misuse: nested tapes, consumed tape, or detached graph."""


class FormatError(ValueError):
    """Malformed tensor serialization record."""


_TAPE = None
_NODE_COUNTER = 0
_PATTERN_WATCH = None  # collects relu/max decision signatures when enabled


def _next_node_id():
    global _NODE_COUNTER
    _NODE_COUNTER += 1
    return _NODE_COUNTER


def _check_finite(arr, opname):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{opname} produced non-finite values")


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    ``data`` is the value, ``grad`` (filled by backward) has the same shape,
    ``requires_grad`` marks leaves the user wants derivatives for and is
    propagated to every op output that depends on one.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = _next_node_id()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self):
        """Copy of the value with no tape linkage."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of operations for one forward/backward episode.

    Entries are (output tensor, input tensors, backward rule) appended in
    execution order. ``kink_tol`` > 0 arms kink detection: relu and max ops
    count evaluations that land within the tolerance of a nondifferentiable
    point (used by grad_check to flag excluded points).
    """

    def __init__(self):
        self.ops = []
        self.consumed = False
        self.kink_tol = 0.0
        self.kink_events = 0
        self._produced = set()

    def __len__(self):
        return len(self.ops)


@contextmanager
def record():
    """Activate a fresh tape for the duration of the block."""
    global _TAPE
    if _TAPE is not None:
        raise TapeError("a tape is already active; one tape per training run")
    tape = Tape()
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = None


def active_tape():
    return _TAPE


def _register(out, inputs, backward_fn):
    """Record an op if a tape is active and any input wants gradients."""
    tape = _TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.consumed:
            raise TapeError("tape already consumed by backward")
        out.requires_grad = True
        tape.ops.append((out, inputs, backward_fn))
        tape._produced.add(out.node_id)
    return out


def _kink_hook(min_gap):
    tape = _TAPE
    if tape is not None and tape.kink_tol > 0.0 and min_gap <= tape.kink_tol:
        tape.kink_events += 1


def _pattern_hook(decision):
    """Record a digest of a relu mask / max argmax so grad_check can detect
    evaluations whose piecewise branch differs between perturbed points."""
    if _PATTERN_WATCH is not None:
        _PATTERN_WATCH.append(
            zlib.crc32(np.ascontiguousarray(decision).tobytes())
        )


def _broadcast_check(sa, sb):
    ra, rb = len(sa), len(sb)
    r = max(ra, rb)
    pa = (1,) * (r - ra) + tuple(sa)
    pb = (1,) * (r - rb) + tuple(sb)
    for da, db in zip(pa, pb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g, shape):
    """Sum gradient over axes that were expanded by broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    _broadcast_check(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _register(out, [a, b], bw)


def sub(a, b):
    _broadcast_check(a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _register(out, [a, b], bw)


def mul(a, b):
    _broadcast_check(a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _register(out, [a, b], bw)


def div(a, b):
    _broadcast_check(a.shape, b.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(a.data / b.data)  # non-finite results raise in Tensor()
    y = out.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * y / b.data, b.shape),
        )

    return _register(out, [a, b], bw)


def neg(a):
    out = Tensor(-a.data)
    return _register(out, [a], lambda g: (-g,))


def relu(a):
    x = a.data
    _kink_hook(float(np.min(np.abs(x))) if x.size else np.inf)
    out = Tensor(np.maximum(x, 0.0))
    mask = x > 0.0  # subgradient 0 at exactly 0
    _pattern_hook(mask)

    def bw(g):
        return (g * mask,)

    return _register(out, [a], bw)


def sigmoid(a):
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _register(out, [a], bw)


def tanh(a):
    y = np.tanh(a.data)
    out = Tensor(y)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _register(out, [a], bw)


def exp(a):
    y = np.exp(a.data)
    out = Tensor(y)
    return _register(out, [a], lambda g: (g * y,))


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(np.log(a.data))
    return _register(out, [a], lambda g: (g / a.data,))


def sqrt(a):
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.data)
    out = Tensor(y)
    return _register(out, [a], lambda g: (g * 0.5 / y,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind, a, b=None):
    """Dispatch the elementwise op set {add, sub, mul, relu, sigmoid, tanh}."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} requires two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} takes a single operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# structural primitives


def matmul(a, b):
    """Matrix product of two rank-2 tensors or two batched rank-3 tensors."""
    da, db = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    if da.ndim == 2 and db.ndim == 2:
        if da.shape[1] != db.shape[0]:
            raise ShapeError(f"matmul inner extents {da.shape} x {db.shape}")
        out = Tensor(da @ db)

        def bw(g):
            return (g @ db.T if need_a else None,
                    da.T @ g if need_b else None)

    elif da.ndim == 3 and db.ndim == 3:
        if da.shape[0] != db.shape[0] or da.shape[2] != db.shape[1]:
            raise ShapeError(f"batched matmul extents {da.shape} x {db.shape}")
        out = Tensor(da @ db)

        def bw(g):
            return (g @ db.transpose(0, 2, 1) if need_a else None,
                    da.transpose(0, 2, 1) @ g if need_b else None)

    else:
        raise ShapeError("matmul supports rank-2 or batched rank-3 operands")
    return _register(out, [a, b], bw)


def concat(tensors, axis):
    """Join tensors along axis; all other extents must agree."""
    if not tensors:
        raise ShapeError("concat of an empty list")
    axis = int(axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref):
            raise ShapeError("concat rank mismatch")
        for i, (x, y) in enumerate(zip(t.shape, ref)):
            if i != axis % len(ref) and x != y:
                raise ShapeError("concat off-axis extent mismatch")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _register(out, list(tensors), bw)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    axis = int(axis)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow out of range")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _register(out, [a], bw)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    return _register(out, [a], lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _register(out, [a], lambda g: (g.transpose(inv),))


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = [axes]
    if any(not -ndim <= ax < ndim for ax in axes):
        raise ShapeError(f"invalid reduction axes {axes}")
    out = tuple(sorted(ax % ndim for ax in axes))
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated reduction axes {axes}")
    return out


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def bw(g):
        return (_expand_reduced(g, a.shape, axes, keepdims).copy(),)

    return _register(out, [a], bw)


def tmean(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def bw(g):
        return (_expand_reduced(g, a.shape, axes, keepdims) / count,)

    return _register(out, [a], bw)


def tmax(a, axes=None, keepdims=False):
    """Max reduction; backward routes the gradient to a single argmax element."""
    axes = _norm_axes(axes, a.ndim)
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    perm = kept + axes
    moved = a.data.transpose(perm)
    lead = moved.shape[: len(kept)]
    flat = moved.reshape(lead + (-1,))
    idx = np.argmax(flat, axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    _pattern_hook(idx)
    if flat.shape[-1] > 1:
        top2 = np.partition(flat, -2, axis=-1)[..., -2:]
        _kink_hook(float(np.min(top2[..., 1] - top2[..., 0])))
    out_data = vals if keepdims is False else vals.reshape(
        tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    )
    out = Tensor(out_data)

    def bw(g):
        gflat = g.reshape(lead)
        buf = np.zeros_like(flat)
        np.put_along_axis(buf, idx[..., None], gflat[..., None], axis=-1)
        return (buf.reshape(moved.shape).transpose(np.argsort(perm)),)

    return _register(out, [a], bw)


def reduce(op_kind, a, axes=None, keepdims=False):
    """Dispatch the reduction set {sum, mean, max}."""
    table = {"sum": tsum, "mean": tmean, "max": tmax}
    if op_kind not in table:
        raise ValueError(f"unknown reduction {op_kind!r}")
    return table[op_kind](a, axes=axes, keepdims=keepdims)


def softmax(a, axis):
    """Probability-normalized exponentials along axis, max-shifted for stability."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _register(out, [a], bw)


def pad2d(a, pads):
    """Zero-pad the last two axes by (top, bottom, left, right)."""
    pt, pb, pl, pr = pads
    width = [(0, 0)] * (a.ndim - 2) + [(pt, pb), (pl, pr)]
    out = Tensor(np.pad(a.data, width))
    sl = (Ellipsis, slice(pt, pt + a.shape[-2]), slice(pl, pl + a.shape[-1]))

    def bw(g):
        return (g[sl],)

    return _register(out, [a], bw)


def roll2d(a, shifts):
    """Cyclic shift of the last two axes."""
    sy, sx = shifts
    out = Tensor(np.roll(a.data, (sy, sx), axis=(-2, -1)))

    def bw(g):
        return (np.roll(g, (-sy, -sx), axis=(-2, -1)),)

    return _register(out, [a], bw)


# ---------------------------------------------------------------------------
# convolution primitives (stride 1 unless stated otherwise)


def _window_view(x, kh, kw):
    """(B, C, Hp, Wp) -> strided view (B, C, kh, kw, Ho, Wo), no copy."""
    b, c, hp, wp = x.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    sb, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, kh, kw, ho, wo), (sb, sc, sh, sw, sh, sw)
    )


def conv2d(x, w, padding=0, groups=1):
    """2-D cross-correlation, stride 1.

    x: (B, Cin, H, W); w: (Cout, Cin/groups, kh, kw). groups is 1 (dense,
    e.g. pointwise) or Cin (depthwise with one filter per channel).
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and kernel")
    b, cin, h, wth = xd.shape
    cout, cper, kh, kw = wd.shape
    if groups == 1:
        depthwise = False
        if cper != cin:
            raise ShapeError(
                f"conv2d channel mismatch: input {cin}, kernel {wd.shape}"
            )
    elif groups == cin:
        depthwise = True
        if cper != 1 or cout != cin:
            raise ShapeError(
                f"depthwise conv2d needs kernel ({cin}, 1, k, k), got {wd.shape}"
            )
    else:
        raise ShapeError(f"unsupported group count {groups}")
    p = int(padding)
    if h + 2 * p < kh or wth + 2 * p < kw:
        raise ShapeError("conv2d spatial extents smaller than kernel")
    need_x, need_w = x.requires_grad, w.requires_grad

    if kh == 1 and kw == 1 and not depthwise:
        # pointwise: a channel-mixing matmul, no patch gather needed
        if p:
            raise ShapeError("padding is meaningless for a 1x1 kernel")
        w2 = wd.reshape(cout, cin)
        y = np.tensordot(xd, w2, axes=([1], [1])).transpose(0, 3, 1, 2)
        out = Tensor(np.ascontiguousarray(y))

        def bw(g):
            gx = gw = None
            if need_x:
                gx = np.ascontiguousarray(
                    np.tensordot(g, w2, axes=([1], [0])).transpose(0, 3, 1, 2)
                )
            if need_w:
                gw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))
                gw = gw.reshape(wd.shape)
            return gx, gw

        return _register(out, [x, w], bw)

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    if depthwise:
        # per-tap multiply-add beats materializing the patch tensor
        ho, wo = h + 2 * p - kh + 1, wth + 2 * p - kw + 1
        y = np.zeros((b, cin, ho, wo))
        for ki in range(kh):
            for kj in range(kw):
                y += xp[:, :, ki : ki + ho, kj : kj + wo] * wd[None, :, 0, ki, kj, None, None]
        out = Tensor(y)

        def bw(g):
            gx = gw = None
            if need_x:
                gxp = np.zeros_like(xp)
                for ki in range(kh):
                    for kj in range(kw):
                        gxp[:, :, ki : ki + ho, kj : kj + wo] += (
                            g * wd[None, :, 0, ki, kj, None, None]
                        )
                gx = gxp[:, :, p : p + h, p : p + wth] if p else gxp
                gx = np.ascontiguousarray(gx)
            if need_w:
                gw = np.empty_like(wd)
                for ki in range(kh):
                    for kj in range(kw):
                        gw[:, 0, ki, kj] = (
                            g * xp[:, :, ki : ki + ho, kj : kj + wo]
                        ).sum(axis=(0, 2, 3))
            return gx, gw

        return _register(out, [x, w], bw)

    cols = _window_view(xp, kh, kw)
    y = np.tensordot(cols, wd, axes=([1, 2, 3], [1, 2, 3]))  # (B,Ho,Wo,Cout)
    out = Tensor(np.ascontiguousarray(y.transpose(0, 3, 1, 2)))

    def bw(g):
        gx = gw = None
        if need_x:
            wflip = wd[:, :, ::-1, ::-1]
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gcols = _window_view(gp, kh, kw)
            gxp = np.tensordot(gcols, wflip, axes=([1, 2, 3], [0, 2, 3]))
            gxp = gxp.transpose(0, 3, 1, 2)
            gxp = gxp[:, :, p : p + h, p : p + wth] if p else gxp
            gx = np.ascontiguousarray(gxp)
        if need_w:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
            gw = gw.reshape(wd.shape)
        return gx, gw

    return _register(out, [x, w], bw)


def conv_transpose2d(x, w):
    """Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).

    x: (B, Cin, H, W); w: (Cin, Cout, 2, 2) -> (B, Cout, 2H, 2W). Windows do
    not overlap, so the output is a pure rearrangement of per-pixel products.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[2:] != (2, 2):
        raise ShapeError("conv_transpose2d expects rank-4 input and a 2x2 kernel")
    b, cin, h, wth = xd.shape
    if wd.shape[0] != cin:
        raise ShapeError(f"conv_transpose2d channel mismatch {cin} vs {wd.shape}")
    cout = wd.shape[1]
    t = np.einsum("bchw,cokl->bohkwl", xd, wd, optimize=True)
    out = Tensor(np.ascontiguousarray(t.reshape(b, cout, 2 * h, 2 * wth)))
    need_x, need_w = x.requires_grad, w.requires_grad

    def bw(g):
        gt = g.reshape(b, cout, h, 2, wth, 2)
        gx = np.einsum("bohkwl,cokl->bchw", gt, wd, optimize=True) if need_x else None
        gw = np.einsum("bohkwl,bchw->cokl", gt, xd, optimize=True) if need_w else None
        return gx, gw

    return _register(out, [x, w], bw)


def maxpool2x2(x):
    """2x2 max pooling, stride 2; gradient routes to the argmax of each window."""
    xd = x.data
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError("maxpool2x2 requires even spatial extents")
    r = xd.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    r = np.ascontiguousarray(r).reshape(b, c, h // 2, w // 2, 4)
    idx = np.argmax(r, axis=-1)
    vals = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    _pattern_hook(idx)
    tape = _TAPE
    if tape is not None and tape.kink_tol > 0.0:
        top2 = np.partition(r, -2, axis=-1)[..., -2:]
        _kink_hook(float(np.min(top2[..., 1] - top2[..., 0])))
    out = Tensor(vals)

    def bw(g):
        buf = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        buf = buf.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(buf).reshape(b, c, h, w),)

    return _register(out, [x], bw)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(root):
    """Accumulate d(root)/d(leaf) into every requires_grad leaf on the active tape.

    root must be a scalar produced on the tape; the tape is consumed.
    Returns a map {leaf Tensor: gradient array}.
    """
    tape = _TAPE
    if tape is None:
        raise TapeError("backward requires an active tape")
    if tape.consumed:
        raise TapeError("tape already consumed")
    if root.size != 1:
        raise ShapeError("backward root must be scalar")
    if root.node_id not in tape._produced:
        raise TapeError("root is detached from the active tape")

    for out, inputs, _ in tape.ops:
        out.grad = None
        for t in inputs:
            t.grad = None
    root.grad = np.ones_like(root.data)

    for out, inputs, bw in reversed(tape.ops):
        g = out.grad
        if g is None:
            continue
        grads = bw(g)
        for t, gt in zip(inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            t.grad = gt if t.grad is None else t.grad + gt
    tape.consumed = True

    leaves = {}
    seen = set()
    for _, inputs, _ in tape.ops:
        for t in inputs:
            if (
                t.requires_grad
                and t.node_id not in tape._produced
                and t.node_id not in seen
            ):
                seen.add(t.node_id)
                leaves[t] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return leaves


@dataclass
class GradCheckResult:
    """Outcome of a finite-difference check.

    kink_events counts relu/max evaluations that landed within eps of a
    nondifferentiable point during the analytic pass. excluded_elements
    counts checked coordinates whose +eps and -eps evaluations took
    different piecewise branches (a relu mask or max argmax flipped inside
    the interval): central differences are meaningless across a kink, so
    those points are flagged and left out of the maximum, exactly as a
    kink-adjacent input is.
    """

    max_rel_error: float
    kink_events: int
    elements_checked: int
    excluded_elements: int = 0

    def __float__(self):
        return float(self.max_rel_error)


def _eval_scalar(f, params):
    global _TAPE
    saved, _TAPE = _TAPE, None
    try:
        out = f(*params)
    finally:
        _TAPE = saved
    if out.size != 1:
        raise ShapeError("grad_check target must be scalar-valued")
    return float(out.data.reshape(()))


def _eval_with_pattern(f, params):
    """Evaluate f and capture the signature of every piecewise decision."""
    global _PATTERN_WATCH
    _PATTERN_WATCH = []
    try:
        value = _eval_scalar(f, params)
        signature = tuple(_PATTERN_WATCH)
    finally:
        _PATTERN_WATCH = None
    return value, signature


def grad_check(f, params, eps=1e-5, max_elements=None, seed=0):
    """Compare backward() against central differences, element by element.

    f is a deterministic scalar-valued function of the given parameter
    tensors. Every element is perturbed by +/-eps (or a seeded random subset
    of max_elements per tensor, for large models) and the relative error
    |a - n| / max(1e-8, |a| + |n|) is maximized over all checked elements.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    v1 = _eval_scalar(f, params)
    v2 = _eval_scalar(f, params)
    if v1 != v2:
        raise ValueError("grad_check requires a deterministic function")

    if _TAPE is not None:
        raise TapeError("grad_check cannot run inside an active tape")
    for p in params:  # drop stale gradients from earlier episodes
        p.grad = None
    with record() as tape:
        tape.kink_tol = eps
        out = f(*params)
        backward(out)
        analytic = [
            p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
            for p in params
        ]
        kinks = tape.kink_events

    rng = np.random.default_rng(seed)
    max_err = 0.0
    checked = 0
    excluded = 0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            idxs = np.sort(rng.choice(n, size=max_elements, replace=False))
        else:
            idxs = range(n)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + eps
            fp, sig_p = _eval_with_pattern(f, params)
            flat[j] = orig - eps
            fm, sig_m = _eval_with_pattern(f, params)
            flat[j] = orig
            if sig_p != sig_m:
                excluded += 1  # a kink lies inside the interval
                continue
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(aflat[j] - numeric) / max(1e-8, abs(aflat[j]) + abs(numeric))
            if err > max_err:
                max_err = err
            checked += 1
    return GradCheckResult(max_err, kinks, checked, excluded)


# ---------------------------------------------------------------------------
# serialization: magic "TBCL", version u32, rank u32, extents u64, f64 data LE

_MAGIC = b"TBCL"
_VERSION = 1


def tensor_to_bytes(t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    head = _MAGIC + struct.pack("<II", _VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one serialized tensor record; returns (Tensor, next_offset)."""
    if buf[offset : offset + 4] != _MAGIC:
        raise FormatError("bad tensor magic")
    offset += 4
    try:
        version, rank = struct.unpack_from("<II", buf, offset)
        offset += 8
        shape = struct.unpack_from(f"<{rank}Q", buf, offset) if rank else ()
        offset += 8 * rank
    except struct.error as exc:
        raise FormatError("truncated tensor header") from exc
    if version != _VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    count = int(np.prod(shape)) if rank else 1
    end = offset + 8 * count
    if end > len(buf):
        raise FormatError("truncated tensor payload")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return Tensor(data.reshape(shape).copy()), end


def save_tensor(t, path):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor record")
    return t
