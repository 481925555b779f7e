"""Small reverse-mode automatic differentiation engine on numpy arrays.

Everything downstream (featurizers, graph layers, the bilinear scorer and its
loss) is expressed in terms of the primitives here.  Each primitive records
its parents and a per-parent vector-Jacobian product; ``backward`` replays the
recorded graph in reverse creation order, which is a valid reverse topological
order because an operation's output is always created after its inputs.

All values are 64-bit floats.  Gradient replay is deterministic: the same
graph built twice yields bit-identical gradients.
"""

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

_ids = itertools.count()

# Global switch used to skip tape construction during pure inference.
_grad_enabled = True


class no_grad:
    """Context manager that disables gradient recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients.

    Parameters
    ----------
    data : array-like
        Converted to a float64 ndarray (scalars become 0-d arrays).
    requires_grad : bool
        Leaf flag; interior nodes derive it from their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps", "_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjps = ()
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return "Tensor(%r, requires_grad=%r)" % (self.data, self.requires_grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        table = _backprop(self)
        for node, g in table:
            if node._parents == () and node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad = node.grad + g


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x, requires_grad=False)


def parameter(x):
    return Tensor(x, requires_grad=True)


def _make(data, parents, vjps):
    """Build an interior node; collapses to a constant when grads are off."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def _backprop(root):
    """Walk the graph from ``root`` and return [(node, grad)] for every
    grad-requiring node, in reverse creation order."""
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        n = stack.pop()
        if n._id in seen or not n.requires_grad:
            continue
        seen.add(n._id)
        nodes.append(n)
        stack.extend(n._parents)
    nodes.sort(key=lambda n: n._id, reverse=True)

    grads = {root._id: np.ones_like(root.data)}
    out = []
    for n in nodes:
        g = grads.get(n._id)
        if g is None:
            continue
        out.append((n, g))
        for parent, vjp in zip(n._parents, n._vjps):
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + contrib
            else:
                grads[parent._id] = contrib
    return out


def gradients(loss, params):
    """Gradients of a scalar ``loss`` w.r.t. each tensor in ``params``.

    Parameters never touched by the loss get exact zeros.
    """
    if loss.data.size != 1:
        raise ValueError("gradients() requires a scalar loss")
    table = {id(node): g for node, g in _backprop(loss)}
    return [table.get(id(p), np.zeros_like(p.data)) for p in params]


# -- arithmetic ----------------------------------------------------------

def _unbroadcast(g, shape):
    """Reduce a gradient back to ``shape`` after scalar/array broadcasting."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # only scalar-vs-array broadcasting is supported by these primitives
    raise ValueError("unsupported broadcast from %r to %r" % (shape, g.shape))


def add(a, b):
    return _make(a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(g, b.data.shape)))


def sub(a, b):
    return _make(a.data - b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(-g, b.data.shape)))


def neg(a):
    return _make(-a.data, (a,), (lambda g: -g,))


def mul(a, b):
    return _make(a.data * b.data, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.data.shape),
                  lambda g: _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    return _make(a.data / b.data, (a, b),
                 (lambda g: _unbroadcast(g / b.data, a.data.shape),
                  lambda g: _unbroadcast(-g * a.data / (b.data * b.data),
                                         b.data.shape)))


def matmul(a, b):
    """Matrix/vector product for 1-d and 2-d operands."""
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def grad_a(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return np.matmul(g, bd.T)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd)
        if ad.ndim == 1 and bd.ndim == 2:
            return np.matmul(bd, g)
        return g * bd  # 1d @ 1d

    def grad_b(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return np.matmul(ad.T, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.matmul(ad.T, g)
        if ad.ndim == 1 and bd.ndim == 2:
            return np.outer(ad, g)
        return g * ad

    return _make(out, (a, b), (grad_a, grad_b))


def dot(a, b):
    return matmul(a, b)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None):
    axes = _norm_axes(axis, a.data.ndim)
    out = np.sum(a.data, axis=axes if axes else None)

    def grad(g):
        ge = np.asarray(g)
        for ax in sorted(axes):
            ge = np.expand_dims(ge, ax)
        return np.broadcast_to(ge, a.data.shape).copy()

    return _make(out, (a,), (grad,))


def tmean(a, axis=None):
    axes = _norm_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    return tsum(a, axis) * (1.0 / count)


def tmax(a, axis=0):
    """Max over one axis of a 2-d tensor; gradient flows to the first
    argmax per slice (ties broken by position, matching np.argmax)."""
    if a.data.ndim != 2:
        raise ValueError("tmax expects a 2-d tensor")
    idx = np.argmax(a.data, axis=axis)
    out = np.max(a.data, axis=axis)

    def grad(g):
        z = np.zeros_like(a.data)
        cols = np.arange(idx.size)
        if axis == 0:
            z[idx, cols] = g
        else:
            z[cols, idx] = g
        return z

    return _make(out, (a,), (grad,))


def concat(parts):
    """Concatenate 1-d tensors."""
    parts = [_wrap(p) for p in parts]
    data = np.concatenate([p.data for p in parts])
    vjps = []
    off = 0
    for p in parts:
        start, stop = off, off + p.data.shape[0]
        vjps.append(lambda g, s=start, e=stop: g[s:e])
        off = stop
    return _make(data, tuple(parts), tuple(vjps))


def stack_rows(rows):
    """Stack 1-d tensors into a 2-d matrix, one tensor per row."""
    rows = [_wrap(r) for r in rows]
    data = np.stack([r.data for r in rows])
    vjps = [lambda g, i=i: g[i] for i in range(len(rows))]
    return _make(data, tuple(rows), tuple(vjps))


def hconcat(a, b):
    """Concatenate two 2-d tensors along columns."""
    na = a.data.shape[1]
    data = np.concatenate([a.data, b.data], axis=1)
    return _make(data, (a, b),
                 (lambda g: g[:, :na], lambda g: g[:, na:]))


def row(a, i):
    """Select row ``i`` of a 2-d tensor as a 1-d tensor."""

    def grad(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return full

    return _make(a.data[i], (a,), (grad,))


def slice1d(a, start, stop):
    def grad(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return full

    return _make(a.data[start:stop], (a,), (grad,))


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,),
                 (lambda g: g.reshape(a.data.shape),))


# -- nonlinearities ------------------------------------------------------

def sigmoid(a):
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (a,), (lambda g: g * y * (1.0 - y),))


def relu(a):
    y = np.maximum(a.data, 0.0)
    return _make(y, (a,), (lambda g: g * (a.data > 0),))


def leaky_relu(a, slope=0.2):
    x = a.data
    y = np.where(x > 0, x, slope * x)
    return _make(y, (a,), (lambda g: g * np.where(x > 0, 1.0, slope),))


def elu(a, alpha=1.0):
    x = a.data
    neg_part = alpha * (np.exp(np.minimum(x, 0.0)) - 1.0)
    y = np.where(x > 0, x, neg_part)
    return _make(y, (a,),
                 (lambda g: g * np.where(x > 0, 1.0, neg_part + alpha),))


def log(a):
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def exp(a):
    y = np.exp(a.data)
    return _make(y, (a,), (lambda g: g * y,))


def sqrt(a):
    y = np.sqrt(a.data)
    return _make(y, (a,), (lambda g: g / (2.0 * y),))


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes through only strictly inside."""
    y = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(y, (a,), (lambda g: g * inside,))


def masked_row_softmax(logits, mask):
    """Row-wise softmax restricted to positions where ``mask`` is nonzero.

    ``mask`` is a constant 0/1 ndarray; every row must have at least one
    nonzero entry.  Masked positions get probability exactly 0.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any(axis=1).all():
        raise ValueError("masked_row_softmax: some row has an empty mask")
    z = np.where(m, logits.data, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    y = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return y * (g - inner)

    return _make(y, (logits,), (grad,))


def add_outer(s, t):
    """out[i, j] = s[i] + t[j] for 1-d inputs."""
    data = s.data[:, None] + t.data[None, :]
    return _make(data, (s, t),
                 (lambda g: g.sum(axis=1), lambda g: g.sum(axis=0)))


# -- convolution ---------------------------------------------------------

def conv2d(x, w, b, stride=2, padding=1):
    """2-d convolution with bias.

    x: (C_in, H, W), w: (C_out, C_in, kh, kw), b: (C_out,).
    """
    xd, wd = x.data, w.data
    cin, h, wid = xd.shape
    cout, cin2, kh, kw = wd.shape
    if cin != cin2:
        raise ValueError("conv2d: channel mismatch")
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding)))
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (wid + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # (cin, hout, wout, kh, kw)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(hout * wout, cin * kh * kw)
    w2 = wd.reshape(cout, cin * kh * kw)
    out = (cols @ w2.T).T.reshape(cout, hout, wout) + b.data[:, None, None]

    def grad_x(g):
        g2 = g.reshape(cout, -1)
        gcols = (g2.T @ w2).reshape(hout, wout, cin, kh, kw)
        gcols = gcols.transpose(2, 0, 1, 3, 4)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, di:di + stride * hout:stride,
                    dj:dj + stride * wout:stride] += gcols[:, :, :, di, dj]
        if padding:
            return gxp[:, padding:-padding, padding:-padding]
        return gxp

    def grad_w(g):
        g2 = g.reshape(cout, -1)
        return (g2 @ cols).reshape(wd.shape)

    def grad_b(g):
        return g.sum(axis=(1, 2))

    return _make(out, (x, w, b), (grad_x, grad_w, grad_b))


# -- optimizer -----------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators for Adam."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One Adam update, in place, with the standard bias correction."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("adam_step: params/grads/state length mismatch")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- gradient checking ---------------------------------------------------

def grad_check(f, params, h=1e-5):
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor and closing
    over ``params``.  Returns the maximum relative error
    |g_ad - g_fd| / max(1, |g_ad|, |g_fd|) over every coordinate.
    """
    loss = f()
    ad = gradients(loss, params)
    worst = 0.0
    for p, g in zip(params, ad):
        flat = p.data.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(f().data)
            flat[i] = keep - h
            down = float(f().data)
            flat[i] = keep
            fd = (up - down) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]), abs(fd))
            if err > worst:
                worst = err
    return worst


# -- named-tensor checkpoints --------------------------------------------

def save_named_tensors(path, tensors):
    """Write a {name: array} mapping as JSON with shape + row-major data.

    JSON floats are IEEE doubles, so the round trip is exact.
    """
    blob = {}
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        blob[name] = {"shape": list(arr.shape),
                      "data": [float(v) for v in arr.reshape(-1)]}
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_named_tensors(path):
    """Inverse of save_named_tensors; returns {name: float64 ndarray}."""
    with open(path) as fh:
        blob = json.load(fh)
    out = {}
    for name, rec in blob.items():
        shape = tuple(rec["shape"])
        arr = np.asarray(rec["data"], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise ValueError("checkpoint entry %r has %d values for shape %r"
                             % (name, arr.size, shape))
        out[name] = arr.reshape(shape)
    return out
