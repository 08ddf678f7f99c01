"""Minimal dense-tensor engine with reverse-mode autodiff.

Everything is float32. Each op builds a node in an implicit tape; calling
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients additively into every reachable tensor with
``requires_grad``. A tape is consumed by exactly one backward pass.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels
from .kernels import numpy_backend

F32 = np.float32

# gelu tanh approximation constant: sqrt(2/pi)
GELU_C = 0.7978845608

# Production dtype is float32. grad_check temporarily switches to float64 so
# numeric derivatives are not drowned in f32 rounding noise.
_DTYPE = np.float32


@contextlib.contextmanager
def default_dtype(dtype):
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


class NumericError(RuntimeError):
    """An op produced NaN/Inf, or numeric preconditions were violated."""


class GraphConsumedError(RuntimeError):
    """backward() called twice on the same graph."""


def _asarray(data):
    return np.asarray(data, dtype=_DTYPE)


def check_finite(a, what="tensor"):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = _asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise NumericError("backward() requires a scalar loss")
        if self._consumed:
            raise GraphConsumedError("graph already consumed by a backward pass")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        if not self.requires_grad:
            # scalar loss of constants only; nothing to do
            pass
        for node in reversed(topo):
            node._consumed = True
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # free the closure so activations can be collected
            node._backward = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _node(self.data + other.data, (self, other))

        def bw(g):
            self._accum(_unbroadcast(g, self.data.shape))
            other._accum(_unbroadcast(g, other.data.shape))
        out._backward = bw
        return out

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _node(self.data - other.data, (self, other))

        def bw(g):
            self._accum(_unbroadcast(g, self.data.shape))
            other._accum(_unbroadcast(-g, other.data.shape))
        out._backward = bw
        return out

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _node(self.data * other.data, (self, other))
        a, b = self.data, other.data

        def bw(g):
            self._accum(_unbroadcast(g * b, a.shape))
            other._accum(_unbroadcast(g * a, b.shape))
        out._backward = bw
        return out

    def __neg__(self):
        out = _node(-self.data, (self,))
        out._backward = lambda g: self._accum(-g)
        return out

    def scale(self, c):
        """Multiply by a constant scalar or ndarray (no gradient into c)."""
        c = _asarray(c)
        out = _node(self.data * c, (self,))
        out._backward = lambda g: self._accum(_unbroadcast(g * c, self.data.shape))
        return out

    def add_const(self, c):
        out = _node(self.data + _asarray(c), (self,))
        out._backward = lambda g: self._accum(_unbroadcast(g, self.data.shape))
        return out

    def pow_const(self, p):
        p = float(p)
        y = self.data ** p
        out = _node(y, (self,))
        x = self.data

        def bw(g):
            self._accum(g * p * x ** (p - 1.0))
        out._backward = bw
        return out

    def exp(self):
        y = np.exp(self.data)
        check_finite(y, "exp")
        out = _node(y, (self,))
        out._backward = lambda g: self._accum(g * y)
        return out

    def log(self):
        if np.any(self.data <= 0):
            raise NumericError("log of non-positive value")
        out = _node(np.log(self.data), (self,))
        x = self.data
        out._backward = lambda g: self._accum(g / x)
        return out

    def sum(self):
        out = _node(self.data.sum(dtype=self.data.dtype).reshape(()), (self,))
        out._backward = lambda g: self._accum(np.broadcast_to(g, self.data.shape).astype(self.data.dtype))
        return out

    def mean(self):
        n = 1.0 / self.data.size
        return self.sum().scale(n)

    def reshape(self, *shape):
        out = _node(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self._accum(g.reshape(self.data.shape))
        return out


def _node(data, prev):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in prev)
    out._prev = tuple(prev)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- activations ----------------------------------------------------------

def relu(x):
    out = _node(np.maximum(x.data, 0), (x,))
    mask = (x.data > 0).astype(x.data.dtype)
    out._backward = lambda g: x._accum(g * mask)
    return out


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))
    y = y.astype(x.data.dtype)
    out = _node(y, (x,))
    out._backward = lambda g: x._accum(g * y * (1.0 - y))
    return out


def gelu(x):
    """tanh-approximation gelu."""
    v = x.data
    inner = v.dtype.type(GELU_C) * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)
    out = _node(y, (x,))

    def bw(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * v * v)
        x._accum(g * (0.5 * (1.0 + t) + 0.5 * v * dt).astype(v.dtype))
    out._backward = bw
    return out


def softplus(x):
    """log(1 + exp(x)), numerically stabilized."""
    v = x.data
    y = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    out = _node(y.astype(v.dtype), (x,))
    s = 1.0 / (1.0 + np.exp(-v.astype(np.float64)))

    def bw(g):
        x._accum((g * s).astype(v.dtype))
    out._backward = bw
    return out


def activation(kind, x):
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind: {kind}")


# -- structured ops -------------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation over a (Cin,H,W) map.

    w: (Cout, Cin/groups, kH, kW); groups inferred from channel counts.
    """
    cin = x.data.shape[0]
    cout, cing, kh, kw = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("even kernel sizes unsupported")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if cin % cing != 0 or cout % (cin // cing) != 0:
        raise ValueError(f"channel mismatch: x has {cin}, w is {w.data.shape}")
    if x.data.dtype == np.float32:
        fwd, bwd_kernel = kernels.conv2d_forward, kernels.conv2d_backward
    else:
        # the compiled kernel is f32-only; f64 (grad-check mode) goes via numpy
        fwd, bwd_kernel = numpy_backend.conv2d_forward, numpy_backend.conv2d_backward
    y = fwd(np.ascontiguousarray(x.data), np.ascontiguousarray(w.data),
            stride, padding)
    if y.shape[1] < 1 or y.shape[2] < 1:
        raise ValueError("conv output collapsed to zero size")
    if b is not None:
        y = y + b.data.reshape(-1, 1, 1)
    check_finite(y, "conv2d output")
    prev = (x, w) if b is None else (x, w, b)
    out = _node(y, prev)
    xd, wd = x.data, w.data

    def bw(g):
        g = np.ascontiguousarray(g)
        need_dx = x.requires_grad
        dx, dw = bwd_kernel(np.ascontiguousarray(xd),
                            np.ascontiguousarray(wd), g, stride, padding)
        if need_dx:
            x._accum(dx)
        w._accum(dw)
        if b is not None:
            b._accum(g.sum(axis=(1, 2)))
    out._backward = bw
    return out


def upsample_nearest2x(x):
    """(C,H,W) -> (C,2H,2W) by 2x2 replication."""
    c, h, w = x.data.shape
    y = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    out = _node(y, (x,))

    def bw(g):
        x._accum(g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))
    out._backward = bw
    return out


def concat_channels(xs):
    """Stack (C_i,H,W) maps along the channel axis."""
    if not xs:
        raise ValueError("empty input list")
    hw = xs[0].data.shape[1:]
    for t in xs:
        if t.data.shape[1:] != hw:
            raise ValueError("spatial mismatch in concat_channels")
    y = np.concatenate([t.data for t in xs], axis=0)
    out = _node(y, tuple(xs))
    sizes = [t.data.shape[0] for t in xs]
    offs = np.cumsum([0] + sizes)

    def bw(g):
        for t, a, b in zip(xs, offs[:-1], offs[1:]):
            t._accum(g[a:b])
    out._backward = bw
    return out


def slice_channels(x, a, b):
    """View channels [a:b) of a (C,H,W) map; backward zero-pads the rest."""
    out = _node(x.data[a:b], (x,))

    def bw(g):
        full = np.zeros_like(x.data)
        full[a:b] = g
        x._accum(full)
    out._backward = bw
    return out


def sum_over_agents(tensors):
    """Elementwise sum of same-shape tensors, accumulated in sorted-value
    order so the result is bit-identical under any permutation of the inputs
    (sorting gives a canonical order; ties are bitwise equal, so their
    relative order cannot change the partial sums).
    """
    if not tensors:
        raise ValueError("sum_over_agents needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    xs = np.sort(np.stack([t.data for t in tensors], axis=0), axis=0)
    acc = xs[0]
    for i in range(1, xs.shape[0]):
        acc = acc + xs[i]
    out = _node(acc, tuple(tensors))

    def bw(g):
        for t in tensors:
            if t.requires_grad:
                t._accum(g)
    out._backward = bw
    return out


def _sorted_axis0_sum(a):
    """Permutation-invariant ndarray sum over axis 0 (see sum_over_agents)."""
    s = np.sort(a, axis=0)
    acc = s[0]
    for i in range(1, s.shape[0]):
        acc = acc + s[i]
    return acc


def softmax_over_agents(logits):
    """Per-cell softmax across a list of N (1,H,W) logit maps.

    Returns N weight maps summing to 1 per cell. The max and the denominator
    are accumulated order-invariantly, so the weight maps are bit-identical
    under any permutation of the agents.
    """
    if not logits:
        raise ValueError("softmax_over_agents needs at least one agent")
    z = np.stack([t.data for t in logits], axis=0)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    wts = e / _sorted_axis0_sum(e)[None]
    outs = [_node(wts[i], tuple(logits)) for i in range(len(logits))]

    # the softmax couples all inputs: dz_j = w_i (delta_ij - w_j) g_i
    def make_bw(i):
        wi = wts[i]

        def bw(g):
            gw = g * wi
            for j, t in enumerate(logits):
                if not t.requires_grad:
                    continue
                if j == i:
                    t._accum(gw * (1.0 - wts[j]))
                else:
                    t._accum(-gw * wts[j])
        return bw

    for i, o in enumerate(outs):
        o._backward = make_bw(i)
    return outs


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Per-group normalization over (C,H,W) followed by affine gamma/beta."""
    c, h, w = x.data.shape
    if c % groups != 0:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    cg = c // groups
    xr = x.data.reshape(groups, cg * h * w).astype(np.float64)
    mu = xr.mean(axis=1, keepdims=True)
    var = xr.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xr - mu) * inv).reshape(c, h, w).astype(x.data.dtype)
    y = xhat * gamma.data.reshape(-1, 1, 1) + beta.data.reshape(-1, 1, 1)
    out = _node(y, (x, gamma, beta))
    n = cg * h * w

    def bw(g):
        gamma._accum((g * xhat).sum(axis=(1, 2)))
        beta._accum(g.sum(axis=(1, 2)))
        if not x.requires_grad:
            return
        gx = (g * gamma.data.reshape(-1, 1, 1)).reshape(groups, n).astype(np.float64)
        xh = xhat.reshape(groups, n).astype(np.float64)
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xh * (gx * xh).mean(axis=1, keepdims=True))
        x._accum(dx.reshape(c, h, w).astype(xhat.dtype))
    out._backward = bw
    return out


def warp_bilinear(x, sample):
    """Resample a (C,H,W) map through precomputed bilinear sample info.

    `sample` comes from scenegen.make_sampler: integer corner indices into the
    flattened source grid plus 4 weights per target cell; cells outside the
    source get weight 0 (zero fill). Differentiable w.r.t. x only.
    """
    c, h, w = x.data.shape
    idx, wts = sample  # idx: (4, H*W) int, wts: (4, H*W) f32
    flat = x.data.reshape(c, h * w)
    y = np.zeros((c, idx.shape[1]), dtype=x.data.dtype)
    for k in range(4):
        y += flat[:, idx[k]] * wts[k]
    out = _node(y.reshape(c, h, w), (x,))

    def bw(g):
        gf = g.reshape(c, -1)
        dflat = np.zeros_like(flat)
        for k in range(4):
            np.add.at(dflat, (slice(None), idx[k]), gf * wts[k])
        x._accum(dflat.reshape(c, h, w))
    out._backward = bw
    return out


def masked_sum(x, mask):
    """Sum of x over a constant 0/1 mask (broadcastable)."""
    m = _asarray(mask)
    out = _node((x.data * m).sum(dtype=x.data.dtype).reshape(()), (x,))
    out._backward = lambda g: x._accum((g * m * np.ones_like(x.data)).astype(x.data.dtype))
    return out


def smooth_l1(x, beta=1.0):
    """Elementwise huber of x (already the residual): 0.5 x^2/beta inside, |x|-beta/2 outside."""
    beta = float(beta)
    a = np.abs(x.data)
    inside = a < beta
    y = np.where(inside, 0.5 * x.data * x.data / beta, a - 0.5 * beta).astype(x.data.dtype)
    out = _node(y, (x,))
    d = np.where(inside, x.data / beta, np.sign(x.data)).astype(x.data.dtype)
    out._backward = lambda g: x._accum(g * d)
    return out
