"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op records its parents and a backward closure on the
output tensor. ``Tensor.backward`` walks the recorded graph in reverse
topological order and frees it afterwards, so one graph exists per forward
pass. Ops whose inputs are all constants skip recording entirely.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ContractViolation, DimensionError, UnsupportedOpError

__all__ = [
    "Tensor",
    "ParamSet",
    "tensor",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "conv1d",
    "conv2d",
    "concat",
    "take",
    "per_token_apply",
    "rotary_apply",
    "silu",
    "gelu",
    "tanh",
    "exp",
    "floor",
    "grad",
    "finite_diff_check",
    "GradCheckReport",
]


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _unsupported(op):
    def backward(g):
        raise UnsupportedOpError(f"op '{op}' is not differentiable")

    return backward


class Tensor:
    """Immutable float64 array that may carry a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.base is not None or arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return np.array(self.data)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    # -- graph ------------------------------------------------------------
    def backward(self, seed=None):
        if not self.requires_grad:
            raise UnsupportedOpError("output does not depend on any differentiable input")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            # gradients are never updated in place, so sharing the buffer is safe
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return reduce_sum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


# -- elementwise ---------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    out = _make(a.data + b.data, (a, b), backward, "add")
    return out


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: a._accum(-g), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    data = a.data ** p

    def backward(g):
        a._accum(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward, "pow")


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: a._accum(g * data), "exp")


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: a._accum(g * (1.0 - data * data)), "tanh")


def silu(a):
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward(g):
        a._accum(g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make(data, (a,), backward, "silu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    # in-place chain: elementwise passes dominate small-model step time
    x2 = x * x
    u = x2 * (_GELU_C * 0.044715)
    u += _GELU_C
    u *= x
    t = np.tanh(u, out=u)
    half = t + 1.0
    half *= 0.5
    data = half * x
    deriv = t * t
    np.subtract(1.0, deriv, out=deriv)
    deriv *= x
    deriv *= 0.5
    x2 *= 3 * 0.044715 * _GELU_C
    x2 += _GELU_C
    deriv *= x2
    deriv += half

    def backward(g):
        a._accum(g * deriv)

    return _make(data, (a,), backward, "gelu")


def floor(a):
    a = as_tensor(a)
    return _make(np.floor(a.data), (a,), _unsupported("floor"), "floor")


# -- shape ops -----------------------------------------------------------------
def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: a._accum(g.transpose(inv)), "transpose")


def getitem(a, idx):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(a.data[idx], (a,), backward, "getitem")


def take(a, indices, axis):
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    data = np.take(a.data, indices, axis=axis)
    axis = axis % a.ndim

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        a._accum(full)

    return _make(data, (a,), backward, "take")


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            t._accum(piece)

    return _make(data, ts, backward, "concat")


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(data, (a,), backward, "sum")


# -- linear algebra ------------------------------------------------------------
def matmul(a, b):
    """Matrix product with numpy batching rules; 2-D operands for plain use."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # (..., K) @ (K, D): fold leading extents into one GEMM
        lead = int(np.prod(a.shape[:-1], dtype=np.int64))
        a2 = a.data.reshape(lead, a.shape[-1])
        data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(lead, g.shape[-1])
            if a.requires_grad:
                a._accum((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accum(a2.T @ g2)

        return _make(data, (a, b), backward, "matmul")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(data, (a, b), backward, "matmul")


def per_token_apply(x, mats):
    """Apply a constant matrix per token: ``out[..., n, :] = mats[..., n, :, :] @ x[..., n, :]``.

    ``mats`` is a plain array broadcastable against ``x``'s leading extents.
    Used for rotary and camera transforms, which carry no parameters.
    """
    x = as_tensor(x)
    mats = np.asarray(mats, dtype=np.float64)
    if mats.shape[-1] != x.shape[-1] or mats.shape[-2] != x.shape[-1]:
        raise DimensionError(f"per-token operator {mats.shape} does not match channels {x.shape}")
    data = np.matmul(mats, x.data[..., None])[..., 0]

    def backward(g):
        gx = np.matmul(np.swapaxes(mats, -1, -2), g[..., None])[..., 0]
        x._accum(_unbroadcast(gx, x.shape))

    return _make(data, (x,), backward, "per_token_apply")


def rotary_apply(x, cos, sin, blocks=None):
    """Structured per-token operator: rotary pairs, then dense blocks.

    The first ``2 m`` channels (m = cos.shape[-1]) are rotated pairwise by
    ``[[c, s], [-s, c]]`` (the transpose of R(angle)); the remaining channels
    are split into ``blocks.shape[-1]``-wide groups multiplied by ``blocks``.
    Equivalent to ``per_token_apply`` with the assembled block-diagonal matrix.
    """
    x = as_tensor(x)
    c = np.asarray(cos, dtype=np.float64)
    s = np.asarray(sin, dtype=np.float64)
    m = c.shape[-1]
    r = 2 * m
    lead = x.shape[:-1]
    xd = x.data
    xe, xo = xd[..., 0:r:2], xd[..., 1:r:2]
    out = np.empty(np.broadcast_shapes(xd.shape, c.shape[:-1] + (xd.shape[-1],)))
    out[..., 0:r:2] = c * xe + s * xo
    out[..., 1:r:2] = c * xo - s * xe
    rest = xd.shape[-1] - r
    if rest:
        if blocks is None:
            out[..., r:] = xd[..., r:]
        else:
            blocks = np.asarray(blocks, dtype=np.float64)
            bsz = blocks.shape[-1]
            xc = xd[..., r:].reshape(lead + (rest // bsz, bsz, 1))
            out[..., r:] = np.matmul(blocks, xc).reshape(out.shape[:-1] + (rest,))

    def backward(g):
        gx = np.empty_like(g)
        ge, go = g[..., 0:r:2], g[..., 1:r:2]
        gx[..., 0:r:2] = c * ge - s * go
        gx[..., 1:r:2] = s * ge + c * go
        if rest:
            if blocks is None:
                gx[..., r:] = g[..., r:]
            else:
                gc = g[..., r:].reshape(g.shape[:-1] + (rest // bsz, bsz, 1))
                gx[..., r:] = np.matmul(np.swapaxes(blocks, -1, -2), gc).reshape(g.shape[:-1] + (rest,))
        x._accum(_unbroadcast(gx, x.shape))

    return _make(out, (x,), backward, "rotary_apply")


# -- normalisation ---------------------------------------------------------------
def softmax_rows(x):
    """Softmax over the last extent with per-row max subtraction."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax needs a last extent of at least 1")
    if np.isnan(x.data).any():
        raise ContractViolation("softmax_rows received NaN input")
    y = np.subtract(x.data, x.data.max(axis=-1, keepdims=True))
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = g * y
        gx -= y * gx.sum(axis=-1, keepdims=True)
        x._accum(gx)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x, eps=1e-5):
    """Normalise over the channel (last) extent; no affine parameters."""
    x = as_tensor(x)
    if x.shape[-1] < 2:
        raise DimensionError("layer_norm needs at least 2 channels")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        x._accum(inv * (g - gm - y * gy))

    return _make(y, (x,), backward, "layer_norm")


# -- convolutions ----------------------------------------------------------------
def conv1d(x, kernel, stride=1):
    """Valid strided cross-correlation.

    Accepts either plain sequences (``x`` of shape (L,), ``kernel`` of shape
    (K,)) or channelled input ``x`` (N, L, C_in) with ``kernel`` (K, C_in, C_out).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise DimensionError("stride must be positive")
    plain = x.ndim == 1
    if plain:
        if kernel.ndim != 1:
            raise DimensionError("1-D input needs a 1-D kernel")
        x = reshape(x, (1, x.shape[0], 1))
        kernel = reshape(kernel, (kernel.shape[0], 1, 1))
    n, length, cin = x.shape
    k, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"kernel expects {kcin} input channels, got {cin}")
    if k > length:
        raise DimensionError(f"kernel length {k} exceeds input length {length}")
    n_out = (length - k) // stride + 1
    idx = np.arange(n_out)[:, None] * stride + np.arange(k)[None, :]
    windows = take(x, idx, axis=1)  # (N, n_out, K, C_in)
    out = matmul(reshape(windows, (n, n_out, k * cin)), reshape(kernel, (k * cin, cout)))
    if plain:
        out = reshape(out, (n_out,))
    return out


def conv2d(x, kernel, stride=1):
    """Valid strided 2-D cross-correlation, channels-last.

    ``x``: (N, H, W, C_in); ``kernel``: (kh, kw, C_in, C_out).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"kernel expects {kcin} input channels, got {cin}")
    if kh > h or kw > w:
        raise DimensionError("kernel larger than input")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    rows = np.arange(ho)[:, None] * stride + np.arange(kh)[None, :]  # (ho, kh)
    cols = np.arange(wo)[:, None] * stride + np.arange(kw)[None, :]  # (wo, kw)
    flat = (rows[:, None, :, None] * w + cols[None, :, None, :])  # (ho, wo, kh, kw)
    xs = reshape(x, (n, h * w, cin))
    patches = take(xs, flat, axis=1)  # (N, ho, wo, kh, kw, C_in)
    out = matmul(reshape(patches, (n, ho * wo, kh * kw * cin)), reshape(kernel, (kh * kw * cin, cout)))
    return reshape(out, (n, ho, wo, cout))


# -- parameters and gradients --------------------------------------------------------
class ParamSet(dict):
    """Ordered mapping from parameter name to float64 array.

    Insertion order is the canonical iteration order.
    """

    def copy(self):
        return ParamSet((k, np.array(v, dtype=np.float64)) for k, v in self.items())

    def n_values(self):
        return int(sum(np.size(v) for v in self.values()))

    def flat(self):
        return np.concatenate([np.ravel(v) for v in self.values()]) if self else np.zeros(0)

    def map(self, fn):
        return ParamSet((k, fn(v)) for k, v in self.items())


def grad(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]):
    """Exact reverse-mode gradients of scalar ``f`` for every parameter.

    Returns ``(value, ParamSet of gradients)``. Parameters that do not affect
    ``f`` receive zero gradients.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = f(leaves)
    if not isinstance(out, Tensor):
        raise UnsupportedOpError(f"objective returned {type(out).__name__}, not a Tensor")
    if out.size != 1:
        raise DimensionError("objective must be scalar")
    value = out.item()
    if out.requires_grad:
        out.backward()
    grads = ParamSet()
    for k, leaf in leaves.items():
        grads[k] = np.zeros_like(leaf.data) if leaf.grad is None else np.array(leaf.grad)
    return value, grads


@dataclass
class GradCheckReport:
    tol: float
    h: float
    per_param: dict = field(default_factory=dict)  # name -> max relative error
    directional: dict = field(default_factory=dict)  # name -> relative error along a random direction

    @property
    def max_error(self):
        vals = list(self.per_param.values()) + list(self.directional.values())
        return max(vals) if vals else 0.0

    @property
    def passed(self):
        return self.max_error < self.tol

    def worst(self):
        merged = {**{f"{k}[entry]": v for k, v in self.per_param.items()},
                  **{f"{k}[dir]": v for k, v in self.directional.items()}}
        return max(merged.items(), key=lambda kv: kv[1]) if merged else ("", 0.0)


def _rel_err(a, b, floor):
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(f, params, h=1e-5, tol=1e-4, max_entries=None, seed=0, floor=1e-6,
                      names: Iterable[str] | None = None):
    """Compare reverse-mode gradients with central differences.

    For each parameter tensor, up to ``max_entries`` randomly chosen entries are
    checked individually (all entries when ``max_entries`` is None), and one
    random direction covering the whole tensor is checked as a directional
    derivative. Relative error is ``|a-b| / max(|a|, |b|, floor)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = ParamSet((k, np.array(v, dtype=np.float64)) for k, v in params.items())
    _, g = grad(f, params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, h=h)

    def value_at(name, delta):
        trial = dict(params)
        trial[name] = params[name] + delta
        return f({k: Tensor(v) for k, v in trial.items()}).item()

    for name in (names if names is not None else params.keys()):
        p = params[name]
        size = p.size
        if max_entries is None or size <= max_entries:
            picks = np.arange(size)
        else:
            picks = rng.choice(size, size=max_entries, replace=False)
        worst = 0.0
        for flat_i in picks:
            delta = np.zeros(size)
            delta[flat_i] = h
            delta = delta.reshape(p.shape)
            fd = (value_at(name, delta) - value_at(name, -delta)) / (2 * h)
            worst = max(worst, _rel_err(fd, g[name].reshape(-1)[flat_i], floor))
        report.per_param[name] = worst
        direction = rng.standard_normal(p.shape)
        direction /= max(np.linalg.norm(direction), 1e-300)
        fd = (value_at(name, h * direction) - value_at(name, -h * direction)) / (2 * h)
        report.directional[name] = _rel_err(fd, float(np.sum(g[name] * direction)), floor)
    return report
