"""Deterministic numpy kernels with a small reverse-mode autodiff.

Storage is float32; every reduction (convolution, matrix products, norm
statistics, attention) accumulates in float64 and casts back to the input
dtype.  Passing float64 inputs keeps the whole computation in float64, which
is what the gradient checks use.
"""

import contextlib
from collections import defaultdict

import numpy as np

F64 = np.float64

_grad_enabled = True
_mac_counter = None


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    """Accumulates multiply-accumulate counts per op kind while active."""

    def __init__(self):
        self.by_op = defaultdict(int)

    @property
    def total(self):
        return sum(self.by_op.values())

    def add(self, op, macs):
        self.by_op[op] += int(macs)


@contextlib.contextmanager
def count_macs():
    global _mac_counter
    prev = _mac_counter
    counter = MacCounter()
    _mac_counter = counter
    try:
        yield counter
    finally:
        _mac_counter = prev


def _count(op, macs):
    if _mac_counter is not None:
        _mac_counter.add(op, macs)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data, dtype=F64)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=F64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # interior node: release the graph once its gradient is propagated
                node._parents = ()
                node._backward = None
                node.grad = None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def _make(data, parents, backward):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _accum(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=F64)
    # never updated in place, so aliasing the incoming array is safe
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _out_dtype(*arrs):
    return np.result_type(*[a.dtype for a in arrs])


# -- elementwise -----------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = np.add(a.data, b.data, dtype=_out_dtype(a.data, b.data))

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = np.subtract(a.data, b.data, dtype=_out_dtype(a.data, b.data))

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = np.multiply(a.data, b.data, dtype=_out_dtype(a.data, b.data))

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw)


def scale(a, s):
    a = as_tensor(a)
    out = (a.data * a.data.dtype.type(s)).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: _accum(a, g * s))


def _sigmoid64(x):
    x = x.astype(F64, copy=False)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid64(x.data)

    def bw(g):
        _accum(x, g * s * (1.0 - s))

    return _make(s.astype(x.dtype), (x,), bw)


def silu(x):
    x = as_tensor(x)
    s = _sigmoid64(x.data)
    out = (x.data * s).astype(x.dtype)

    def bw(g):
        _accum(x, g * s * (1.0 + x.data * (1.0 - s)))

    return _make(out, (x,), bw)


# -- shape ops ---------------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: _accum(x, g.transpose(inv)))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out, tensors, bw)


def take(x, index, axis=0):
    """Slice ``index`` (int or slice) along ``axis``, keeping the axis."""
    x = as_tensor(x)
    if isinstance(index, int):
        index = slice(index, index + 1)
    idx = [slice(None)] * x.ndim
    idx[axis] = index
    idx = tuple(idx)
    out = x.data[idx]

    def bw(g):
        full = np.zeros(x.shape, dtype=F64)
        full[idx] = g
        _accum(x, full)

    return _make(out, (x,), bw)


def gather_rows(table, index):
    """Row lookup ``table[index]`` with scatter-add backward."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def bw(g):
        full = np.zeros(table.shape, dtype=F64)
        np.add.at(full, index, g)
        _accum(table, full)

    return _make(out, (table,), bw)


def upsample_nearest(x, factor=2):
    x = as_tensor(x)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        n, c, h, w = x.shape
        _accum(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _make(out, (x,), bw)


def global_avg_pool(x):
    """Mean over all spatial positions: [N, C, H, W] -> [N, C]."""
    x = as_tensor(x)
    n, c = x.shape[:2]
    hw = int(np.prod(x.shape[2:]))
    out = x.data.reshape(n, c, hw).astype(F64).mean(axis=-1).astype(x.dtype)

    def bw(g):
        _accum(x, np.broadcast_to((g / hw)[:, :, None], (n, c, hw)).reshape(x.shape))

    return _make(out, (x,), bw)


# -- linear algebra ----------------------------------------------------------


def linear(x, w, b=None):
    """``x[..., in] @ w[in, out] + b``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0]).astype(F64)
    w64 = w.data.astype(F64)
    y = x2 @ w64
    if b is not None:
        b = as_tensor(b)
        y += b.data
    _count("linear", x2.shape[0] * w.shape[0] * w.shape[1])
    out = y.reshape(*lead, w.shape[1]).astype(_out_dtype(x.data, w.data))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        _accum(x, (g2 @ w64.T).reshape(x.shape))
        _accum(w, x2.T @ g2)
        if b is not None:
            _accum(b, g2.sum(axis=0))

    return _make(out, parents, bw)


def mix(r, bank):
    """Per-sample weighted sum over a stacked bank: r[N, E], bank[E, ...] -> [N, ...]."""
    r, bank = as_tensor(r), as_tensor(bank)
    if r.ndim != 2 or r.shape[1] != bank.shape[0]:
        raise ShapeError(f"mix: weights {r.shape} do not match bank of {bank.shape[0]} entries")
    flat = bank.data.reshape(bank.shape[0], -1).astype(F64)
    r64 = r.data.astype(F64)
    y = r64 @ flat
    _count("mix", r.shape[0] * flat.shape[0] * flat.shape[1])
    out = y.reshape(r.shape[0], *bank.shape[1:]).astype(_out_dtype(r.data, bank.data))

    def bw(g):
        g2 = g.reshape(r.shape[0], -1)
        _accum(r, g2 @ flat.T)
        _accum(bank, (r64.T @ g2).reshape(bank.shape))

    return _make(out, (r, bank), bw)


def _check_conv(x, w, b, stride, pad):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
    h, wd = x.shape[2] + 2 * pad, x.shape[3] + 2 * pad
    if h < kh or wd < kw:
        raise ShapeError(f"conv2d: padded input {h}x{wd} smaller than kernel {kh}x{kw}")


def conv2d(x, w, b=None, stride=1, pad=0):
    """Direct 2-d convolution (cross-correlation), NCHW / OIHW."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_conv(x, w, b, stride, pad)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    m = n * ho * wo
    wmat = w.data.reshape(o, -1).astype(F64)
    # columns are channel-major [C*kh*kw, N*ho*wo]; the copy then walks contiguous rows
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3), dtype=F64).reshape(c, m)
    else:
        xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=F64)
        xp[:, :, pad:pad + h, pad:pad + wd] = x.data
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        if stride > 1:
            win = win[:, :, ::stride, ::stride]
        win = win[:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, m)
    y = wmat @ cols
    if b is not None:
        y += b.data[:, None]
    _count("conv2d", m * o * c * kh * kw)
    dtype = _out_dtype(x.data, w.data)
    out = np.ascontiguousarray(y.reshape(o, n, ho, wo).transpose(1, 0, 2, 3), dtype=dtype)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, m)
        _accum(w, (g2 @ cols.T).reshape(w.shape))
        if b is not None:
            _accum(b, g2.sum(axis=1))
        if not x.requires_grad:
            return
        gcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=F64)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
        _accum(x, gxp[:, :, pad:pad + h, pad:pad + wd])

    return _make(out, parents, bw)


# -- normalization -----------------------------------------------------------


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Group normalization over [N, C, ...]; a 2-d input normalizes per row."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine params must have shape ({c},)")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xr = x.data.reshape(n, groups, -1).astype(F64)
    xr -= xr.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.einsum("ngk,ngk->ng", xr, xr)[..., None] / xr.shape[-1] + eps)
    xr *= inv
    xhat = xr.reshape(x.shape)
    g64 = gamma.data.astype(F64).reshape(bshape)
    y = xhat * g64 + beta.data.astype(F64).reshape(bshape)
    out = y.astype(x.dtype)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        _accum(gamma, (g * xhat).sum(axis=red))
        _accum(beta, g.sum(axis=red))
        if not x.requires_grad:
            return
        gx = (g * g64).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xh * (gx * xh).mean(axis=-1, keepdims=True))
        _accum(x, gx.reshape(x.shape))

    return _make(out, (x, gamma, beta), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis; expressed as a one-group group_norm."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    return reshape(group_norm(flat, 1, gamma, beta, eps), lead + (x.shape[-1],))


# -- attention ---------------------------------------------------------------


def softmax(x, axis=-1, inplace=False):
    e = x if inplace and x.dtype == F64 else np.array(x, dtype=F64)
    e -= e.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def _split_heads(a, heads):
    *lead, length, d = a.shape
    return a.astype(F64).reshape(*lead, length, heads, d // heads).swapaxes(-2, -3)


def attention(q, k, v, heads, return_weights=False):
    """Multi-head scaled dot-product attention over q[..., L, D], k/v[..., M, D]."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attention: feature sizes differ q={q.shape} k={k.shape} v={v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention: k and v need the same number of rows")
    if heads < 1 or d % heads:
        raise ShapeError(f"attention: D={d} not divisible by heads={heads}")
    dh = d // heads
    sc = 1.0 / np.sqrt(dh)
    qh, kh, vh = _split_heads(q.data, heads), _split_heads(k.data, heads), _split_heads(v.data, heads)
    p = qh @ kh.swapaxes(-1, -2)
    p *= sc
    p = softmax(p, inplace=True)
    oh = p @ vh
    length, m = q.shape[-2], k.shape[-2]
    batch = int(np.prod(q.shape[:-2]))
    _count("attention", 2 * batch * length * m * d)
    out = oh.swapaxes(-2, -3).reshape(q.shape).astype(_out_dtype(q.data, k.data, v.data))

    def bw(g):
        gh = _split_heads(g, heads)
        gp = gh @ vh.swapaxes(-1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * sc
        merge = lambda a, ref: a.swapaxes(-2, -3).reshape(ref.shape)
        _accum(q, merge(gs @ kh, q))
        _accum(k, merge(gs.swapaxes(-1, -2) @ qh, k))
        _accum(v, merge(p.swapaxes(-1, -2) @ gh, v))

    res = _make(out, (q, k, v), bw)
    return (res, p) if return_weights else res


# -- losses ------------------------------------------------------------------


def mse(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    diff = a.data.astype(F64) - b.data.astype(F64)
    size = diff.size
    out = np.asarray((diff * diff).sum() / size)

    def bw(g):
        gd = g * 2.0 * diff / size
        _accum(a, gd)
        _accum(b, -gd)

    return _make(out, (a, b), bw)


def weighted_sum(terms):
    """Sum of ``(weight, scalar tensor)`` pairs in float64."""
    terms = [(float(w), as_tensor(t)) for w, t in terms]
    out = np.asarray(sum(w * float(t.data) for w, t in terms), dtype=F64)

    def bw(g):
        for w, t in terms:
            _accum(t, g * w)

    return _make(out, [t for _, t in terms], bw)
