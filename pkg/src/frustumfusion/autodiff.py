"""Reverse-mode automatic differentiation over dense numpy tensors.

Define-by-run: every operation records its parents and a backward closure;
``backward`` walks the graph in reverse topological order. Heavy kernels
(convolution im2col, grid/frustum sampling) dispatch to the selected
backend in ``_kernels``.

Gradient support is first order. Reductions rely on numpy's fixed pairwise
summation, which is bit-stable for a fixed shape and machine.
"""

import contextlib

import numpy as np

from ._kernels import active as _K


class FiniteCheckError(ArithmeticError):
    """Raised when an operation produced NaN/Inf while checks are enabled."""


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""


_finite_checks = False
_grad_enabled = True


def set_finite_checks(flag):
    """Globally enable/disable NaN/Inf detection after every primitive."""
    global _finite_checks
    _finite_checks = bool(flag)


@contextlib.contextmanager
def finite_checks(flag=True):
    global _finite_checks
    old = _finite_checks
    _finite_checks = bool(flag)
    try:
        yield
    finally:
        _finite_checks = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    """Dense n-dimensional float tensor participating in the autodiff graph.

    ``data`` is a float32 or float64 numpy array. ``grad`` is lazily
    allocated with the same shape on the first backward pass and accumulates
    across repeated backward calls until reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if arr.dtype == np.int64 else
                             np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what="tensor"):
        if not np.isfinite(self.data).all():
            raise FiniteCheckError(f"non-finite values in {what}")
        return self

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(_wrap(other, self.dtype), self)

    def __neg__(self):
        return negative(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    # -- method sugar -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return variance(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data, parents, backward_fn, op_name):
    """Create a graph node; prunes recording when grads are off."""
    if _finite_checks and not np.isfinite(data).all():
        raise FiniteCheckError(f"non-finite output of primitive '{op_name}'")
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    out.requires_grad = requires
    if requires:
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        # first contribution: adopt freshly owned arrays, otherwise copy
        # (g may be a view into another node's grad buffer)
        if (isinstance(g, np.ndarray) and g.base is None
                and g.flags.owndata and g.flags.writeable
                and g.dtype == t.data.dtype and g.shape == t.data.shape):
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype)
            if t.grad.shape != t.data.shape:
                t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _accum_into_slice(t, key, g):
    """Accumulate a gradient into a slice of t's grad without temporaries."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad[key] += g


def _unbroadcast(g, shape):
    """Reduce gradient g back to the given operand shape after numpy
    broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss):
    """Populate ``grad`` on every reachable requires_grad tensor with
    d(loss)/d(tensor). ``loss`` must be scalar; repeated calls accumulate."""
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape "
                         f"{loss.shape}")
    if not loss.requires_grad:
        return
    # iterative topological order (graphs can be thousands of nodes deep)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    # intermediate grads are transient per backward pass; only leaves
    # accumulate across repeated calls
    for node in topo:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b):
    a = _wrap(a, getattr(b, "dtype", None) or np.float32)
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _node(out, (a, b), bwd, "add")


def subtract(a, b):
    a = _wrap(a, getattr(b, "dtype", None) or np.float32)
    b = _wrap(b, a.dtype)
    out = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _node(out, (a, b), bwd, "subtract")


def multiply(a, b):
    a = _wrap(a, getattr(b, "dtype", None) or np.float32)
    b = _wrap(b, a.dtype)
    out = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))
    return _node(out, (a, b), bwd, "multiply")


def divide(a, b):
    a = _wrap(a, getattr(b, "dtype", None) or np.float32)
    b = _wrap(b, a.dtype)
    out = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _node(out, (a, b), bwd, "divide")


def negative(a):
    out = -a.data

    def bwd(g):
        _accum(a, -g)
    return _node(out, (a,), bwd, "negative")


def power(a, exponent):
    """a ** exponent for a constant real exponent."""
    e = float(exponent)
    out = a.data ** e

    def bwd(g):
        _accum(a, g * e * a.data ** (e - 1.0))
    return _node(out, (a,), bwd, "power")


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)
    return _node(out, (a,), bwd, "exp")


def log(a):
    out = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)
    return _node(out, (a,), bwd, "log")


def sqrt(a):
    out = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * (0.5 / out))
    return _node(out, (a,), bwd, "sqrt")


def absolute(a):
    out = np.abs(a.data)

    def bwd(g):
        _accum(a, g * np.sign(a.data))
    return _node(out, (a,), bwd, "absolute")


def sin(a):
    out = np.sin(a.data)

    def bwd(g):
        _accum(a, g * np.cos(a.data))
    return _node(out, (a,), bwd, "sin")


def cos(a):
    out = np.cos(a.data)

    def bwd(g):
        _accum(a, -g * np.sin(a.data))
    return _node(out, (a,), bwd, "cos")


def relu(a):
    out = np.maximum(a.data, 0)

    def bwd(g):
        _accum(a, g * (a.data > 0))
    return _node(out, (a,), bwd, "relu")


def _stable_sigmoid(x):
    # single exp: sigma(x) = 1/(1+e^-|x|) for x >= 0, e^-|x|/(1+e^-|x|) else
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a):
    out = _stable_sigmoid(a.data)

    def bwd(g):
        _accum(a, g * (out * (1.0 - out)))
    return _node(out, (a,), bwd, "sigmoid")


def softplus(a, beta=1.0):
    """log(1 + exp(beta*x)) / beta, computed as max(x, 0) + stable tail."""
    bx = beta * a.data
    out = ((np.maximum(bx, 0) + np.log1p(np.exp(-np.abs(bx))))
           * (1.0 / beta)).astype(a.dtype)

    def bwd(g):
        _accum(a, g * _stable_sigmoid(bx).astype(a.dtype))
    return _node(out, (a,), bwd, "softplus")


def clamp_min(a, lo):
    lo = float(lo)
    out = np.maximum(a.data, lo)

    def bwd(g):
        _accum(a, g * (a.data > lo))
    return _node(out, (a,), bwd, "clamp_min")


def clamp_max(a, hi):
    hi = float(hi)
    out = np.minimum(a.data, hi)

    def bwd(g):
        _accum(a, g * (a.data < hi))
    return _node(out, (a,), bwd, "clamp_max")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    ax = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims:
            for i in sorted(ax):
                gg = np.expand_dims(gg, i)
        _accum(a, np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))
    return _node(out, (a,), bwd, "sum")


def mean(a, axis=None, keepdims=False):
    ax = _norm_axis(axis, a.ndim)
    n = 1
    for i in ax:
        n *= a.shape[i]
    return multiply(sum_(a, axis, keepdims), 1.0 / n)


def variance(a, axis=None, keepdims=False):
    """Population variance (ddof=0): mean(x^2) - mean(x)^2."""
    m = mean(a, axis, keepdims=True)
    sq = mean(multiply(a, a), axis, keepdims=True)
    v = subtract(sq, multiply(m, m))
    if keepdims:
        return v
    return reshape(v, np.mean(a.data, axis=_norm_axis(axis, a.ndim)).shape)


def _extreme(a, axis, keepdims, np_fn, arg_fn, name):
    ax = _norm_axis(axis, a.ndim)
    if len(ax) != 1:
        raise ShapeError(f"{name} supports a single axis")
    axi = ax[0]
    out = np_fn(a.data, axis=axi, keepdims=keepdims)
    idx = arg_fn(a.data, axis=axi)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axi)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axi), gg, axis=axi)
        _accum(a, ga)
    return _node(out, (a,), bwd, name)


def reduce_max(a, axis, keepdims=False):
    """Max along one axis; gradient routes to the first argmax (ties)."""
    return _extreme(a, axis, keepdims, np.max, np.argmax, "reduce_max")


def reduce_min(a, axis, keepdims=False):
    return _extreme(a, axis, keepdims, np.min, np.argmin, "reduce_min")


def softmax(a, axis):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * out)
    return _node(out, (a,), bwd, "softmax")


def cumprod(a, axis):
    """Cumulative product along an axis. The gradient uses the division
    form and therefore requires nonzero inputs."""
    out = np.cumprod(a.data, axis=axis)

    def bwd(g):
        rev = tuple(np.s_[::-1] if i == axis % a.ndim else np.s_[:]
                    for i in range(a.ndim))
        acc = np.cumsum((g * out)[rev], axis=axis)[rev]
        _accum(a, acc / a.data)
    return _node(out, (a,), bwd, "cumprod")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    out = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))
    return _node(out, (a,), bwd, "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))
    return _node(out, (a,), bwd, "transpose")


def broadcast_to(a, shape):
    out = np.broadcast_to(a.data, shape)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
    return _node(np.ascontiguousarray(out), (a,), bwd, "broadcast_to")


def concatenate(tensors, axis):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = tuple(np.s_[lo:hi] if i == axis % g.ndim else np.s_[:]
                       for i in range(g.ndim))
            _accum(t, g[sl])
    return _node(out, tuple(tensors), bwd, "concatenate")


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))
    return _node(out, tuple(tensors), bwd, "stack")


def slice_(a, key):
    out = a.data[key]

    def bwd(g):
        _accum_into_slice(a, key, g)
    return _node(out, (a,), bwd, "slice")


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {a.shape} @ "
                         f"{b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    return _node(out, (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# convolutions (batched, no dilation)
# ---------------------------------------------------------------------------

def _pad2(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _pad3(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def conv2d(x, w, bias=None, stride=1, padding=0):
    """x: (B, Ci, H, W); w: (Co, Ci, kh, kw); bias: (Co,) or None."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shapes invalid: x{x.shape} w{w.shape}")
    b_, ci, h, w_ = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w_ + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output empty for x{x.shape} w{w.shape}")
    xp = np.ascontiguousarray(_pad2(x.data, padding))
    cols = _K.unfold2d(xp, kh, kw, stride, stride, ho, wo)
    wmat = w.data.reshape(co, -1)
    omat = wmat @ cols
    if bias is not None:
        omat = omat + bias.data[:, None]
    out = np.ascontiguousarray(
        omat.reshape(co, b_, ho * wo).transpose(1, 0, 2)).reshape(
            b_, co, ho, wo)

    def bwd(g):
        gmat = np.ascontiguousarray(
            g.reshape(b_, co, ho * wo).transpose(1, 0, 2)).reshape(co, -1)
        if w.requires_grad:
            cols2 = _K.unfold2d(xp, kh, kw, stride, stride, ho, wo)
            _accum(w, (gmat @ cols2.T).reshape(w.shape))
        if x.requires_grad:
            gpad = _K.fold2d(np.ascontiguousarray(wmat.T @ gmat), b_, ci,
                             h + 2 * padding, w_ + 2 * padding,
                             kh, kw, stride, stride, ho, wo)
            if padding:
                gpad = gpad[:, :, padding:padding + h, padding:padding + w_]
            _accum(x, gpad)
        if bias is not None and bias.requires_grad:
            _accum(bias, gmat.sum(axis=1))
    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, bwd, "conv2d")


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ShapeError("per-axis value must have length 3")
        return tuple(int(i) for i in v)
    return (int(v),) * 3


# columns processed per GEMM tile; keeps im2col buffers cache-resident and
# bounds peak memory. Tiles below _CACHE_COLS total are kept for the weight
# gradient instead of re-unfolding in backward.
_CONV3D_TILE = 24576
_CACHE_COLS = 4 * 1024 * 1024       # elements


def conv3d(x, w, bias=None, stride=1, padding=0):
    """x: (B, Ci, D, H, W); w: (Co, Ci, kd, kh, kw). stride may be an int
    or a (sd, sh, sw) tuple. Evaluated in column tiles."""
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d shapes invalid: x{x.shape} w{w.shape}")
    sd, sh, sw = _triple(stride)
    b_, ci, d, h, w_ = x.shape
    co, _, kd, kh, kw = w.shape
    do = (d + 2 * padding - kd) // sd + 1
    ho = (h + 2 * padding - kh) // sh + 1
    wo = (w_ + 2 * padding - kw) // sw + 1
    if do <= 0 or ho <= 0 or wo <= 0:
        raise ShapeError(f"conv3d output empty for x{x.shape} w{w.shape}")
    xp = np.ascontiguousarray(_pad3(x.data, padding))
    wmat = w.data.reshape(co, -1)
    n_cols = b_ * do * ho * wo
    geom = (kd, kh, kw, sd, sh, sw, do, ho, wo)
    cache = n_cols * ci * kd * kh * kw <= _CACHE_COLS
    tile = max(_CONV3D_TILE // wo, 1) * wo     # scanline-aligned tiles
    tiles = list(range(0, n_cols, tile)) + [n_cols]
    omat = np.empty((co, n_cols), dtype=x.dtype)
    kept = []
    for lo, hi in zip(tiles[:-1], tiles[1:]):
        cols = _K.unfold3d_range(xp, *geom, lo, hi)
        omat[:, lo:hi] = wmat @ cols
        if cache:
            kept.append(cols)
    if bias is not None:
        omat += bias.data[:, None]
    out = np.ascontiguousarray(
        omat.reshape(co, b_, do * ho * wo).transpose(1, 0, 2)).reshape(
            b_, co, do, ho, wo)

    def bwd(g):
        gmat = np.ascontiguousarray(
            g.reshape(b_, co, do * ho * wo).transpose(1, 0, 2)).reshape(
                co, -1)
        need_w = w.requires_grad
        need_x = x.requires_grad
        gw = np.zeros((co, ci * kd * kh * kw), dtype=w.dtype) \
            if need_w else None
        gpad = np.zeros_like(xp) if need_x else None
        for ti, (lo, hi) in enumerate(zip(tiles[:-1], tiles[1:])):
            gtile = np.ascontiguousarray(gmat[:, lo:hi])
            if need_w:
                cols = kept[ti] if cache else _K.unfold3d_range(
                    xp, *geom, lo, hi)
                gw += gtile @ cols.T
            if need_x:
                _K.fold3d_add_range(
                    gpad, np.ascontiguousarray(wmat.T @ gtile), *geom,
                    lo, hi)
        if need_w:
            _accum(w, gw.reshape(w.shape))
        if need_x:
            gx = gpad
            if padding:
                gx = gx[:, :, padding:padding + d, padding:padding + h,
                        padding:padding + w_]
            _accum(x, gx)
        if bias is not None and bias.requires_grad:
            _accum(bias, gmat.sum(axis=1))
    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, bwd, "conv3d")


def conv_transpose3d(x, w, bias=None, stride=1, padding=0, output_padding=0):
    """x: (B, Ci, D, H, W); w: (Ci, Co, kd, kh, kw).

    Output extent per axis: (n-1)*stride - 2*padding + k + output_padding.
    stride/output_padding may be ints or per-axis triples.
    """
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose3d shapes invalid: x{x.shape} "
                         f"w{w.shape}")
    sd, sh, sw = _triple(stride)
    od, oh, ow = _triple(output_padding)
    for s_, o_ in ((sd, od), (sh, oh), (sw, ow)):
        if o_ >= max(s_, 1) and o_ > 0:
            raise ShapeError("output_padding must be < stride")
    b_, ci, d, h, w_ = x.shape
    _, co, kd, kh, kw = w.shape
    dp = sd * (d - 1) + kd
    hp = sh * (h - 1) + kh
    wp = sw * (w_ - 1) + kw
    do = dp - 2 * padding + od
    ho = hp - 2 * padding + oh
    wo = wp - 2 * padding + ow
    xmat = np.ascontiguousarray(
        x.data.reshape(b_, ci, -1).transpose(1, 0, 2)).reshape(ci, -1)
    wmat = w.data.reshape(ci, -1)
    cols = np.ascontiguousarray(wmat.T @ xmat)        # (Co*k^3, B*D*H*W)
    scat = _K.fold3d(cols, b_, co, dp, hp, wp, kd, kh, kw,
                     sd, sh, sw, d, h, w_)
    # the output window starts `padding` into the scatter buffer; slots
    # past the buffer (possible with output_padding > padding) stay zero
    out = np.zeros((b_, co, do, ho, wo), dtype=x.dtype)
    core = (min(dp, padding + do) - padding,
            min(hp, padding + ho) - padding,
            min(wp, padding + wo) - padding)
    out[:, :, :core[0], :core[1], :core[2]] = \
        scat[:, :, padding:padding + core[0], padding:padding + core[1],
             padding:padding + core[2]]
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]

    def bwd(g):
        gscat = np.zeros((b_, co, dp, hp, wp), dtype=g.dtype)
        gscat[:, :, padding:padding + core[0], padding:padding + core[1],
              padding:padding + core[2]] = \
            g[:, :, :core[0], :core[1], :core[2]]
        gcols = _K.unfold3d(np.ascontiguousarray(gscat), kd, kh, kw,
                            sd, sh, sw, d, h, w_)
        if x.requires_grad:
            gx = (wmat @ gcols).reshape(ci, b_, -1).transpose(1, 0, 2)
            _accum(x, np.ascontiguousarray(gx).reshape(x.shape))
        if w.requires_grad:
            _accum(w, (xmat @ gcols.T).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3, 4)))
    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, bwd, "conv_transpose3d")


def upsample_nearest_2d(x, scale=2):
    """x: (B, C, H, W) -> (B, C, H*scale, W*scale) by replication."""
    s = int(scale)
    out = np.repeat(np.repeat(x.data, s, axis=2), s, axis=3)

    def bwd(g):
        b_, c, h, w_ = x.shape
        _accum(x, g.reshape(b_, c, h, s, w_, s).sum(axis=(3, 5)))
    return _node(out, (x,), bwd, "upsample_nearest_2d")


# ---------------------------------------------------------------------------
# sampling primitives
# ---------------------------------------------------------------------------

def grid_sample_2d(vol, coords):
    """Bilinear sampling with zero padding outside.

    vol: (S, C, H, W); coords: (S, P, 2) in pixel units (x, y). Returns
    (values (S, P, C), cover (S, P) uint8 ndarray). Gradients flow to both
    the volume and the coordinates; out-of-bounds corners carry zero
    gradient.
    """
    vol = vol if isinstance(vol, Tensor) else Tensor(vol)
    coords = coords if isinstance(coords, Tensor) else Tensor(
        np.asarray(coords, dtype=vol.dtype))
    if vol.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(f"grid_sample_2d shapes invalid: vol{vol.shape} "
                         f"coords{coords.shape}")
    vd = np.ascontiguousarray(vol.data)
    cd = np.ascontiguousarray(coords.data)
    out, cover = _K.bilinear_gather(vd, cd)
    s, c, h, w = vol.shape

    def bwd(g):
        g = np.ascontiguousarray(g)
        if vol.requires_grad:
            _accum(vol, _K.bilinear_scatter(cd, g, c, h, w))
        if coords.requires_grad:
            _accum(coords, _K.bilinear_coord_grad(vd, cd, g))
    return _node(out, (vol, coords), bwd, "grid_sample_2d"), cover


def grid_sample_3d(vol, coords):
    """Trilinear sampling with zero padding outside.

    vol: (S, C, D, H, W); coords: (S, P, 3) in index units (x, y, z) with z
    along the depth axis.
    """
    vol = vol if isinstance(vol, Tensor) else Tensor(vol)
    coords = coords if isinstance(coords, Tensor) else Tensor(
        np.asarray(coords, dtype=vol.dtype))
    if vol.ndim != 5 or coords.ndim != 3 or coords.shape[-1] != 3:
        raise ShapeError(f"grid_sample_3d shapes invalid: vol{vol.shape} "
                         f"coords{coords.shape}")
    vd = np.ascontiguousarray(vol.data)
    cd = np.ascontiguousarray(coords.data)
    out, cover = _K.trilinear_gather(vd, cd)
    s, c, d, h, w = vol.shape

    def bwd(g):
        g = np.ascontiguousarray(g)
        if vol.requires_grad:
            _accum(vol, _K.trilinear_scatter(cd, g, c, d, h, w))
        if coords.requires_grad:
            _accum(coords, _K.trilinear_coord_grad(vd, cd, g))
    return _node(out, (vol, coords), bwd, "grid_sample_3d"), cover


def frustum_sample(vol, uvz, start, step):
    """Trilinear sampling of a frustum volume with per-pixel depth ladders.

    vol: (S, C, D, H, W); uvz: (S, P, 3) = (u px, v px, metric depth);
    start: (S, H, W) ndarray of ladder origins; step: (S,) ndarray of ladder
    spacings. The depth coordinate is converted to a fractional hypothesis
    index per neighbouring pixel column. Returns (values, cover ndarray);
    cover is the in-bounds interpolation weight in [0, 1].
    """
    vol = vol if isinstance(vol, Tensor) else Tensor(vol)
    uvz = uvz if isinstance(uvz, Tensor) else Tensor(
        np.asarray(uvz, dtype=vol.dtype))
    if vol.ndim != 5 or uvz.ndim != 3 or uvz.shape[-1] != 3:
        raise ShapeError(f"frustum_sample shapes invalid: vol{vol.shape} "
                         f"uvz{uvz.shape}")
    if vol.shape[2] < 2:
        raise ShapeError("frustum_sample needs at least 2 depth hypotheses")
    vd = np.ascontiguousarray(vol.data)
    cd = np.ascontiguousarray(uvz.data)
    st = np.ascontiguousarray(np.asarray(start, dtype=vol.dtype))
    sp = np.ascontiguousarray(np.asarray(step, dtype=vol.dtype))
    out, cover = _K.frustum_gather(vd, cd, st, sp)
    s, c, d, h, w = vol.shape

    def bwd(g):
        g = np.ascontiguousarray(g)
        if vol.requires_grad:
            _accum(vol, _K.frustum_scatter(cd, st, sp, g, c, d, h, w))
        if uvz.requires_grad:
            _accum(uvz, _K.frustum_coord_grad(vd, cd, st, sp, g))
    return _node(out, (vol, uvz), bwd, "frustum_sample"), cover


# ---------------------------------------------------------------------------
# generic dispatch + finite differences
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "negative": negative,
    "power": power,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "absolute": absolute,
    "sin": sin,
    "cos": cos,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "clamp_min": clamp_min,
    "clamp_max": clamp_max,
    "sum": sum_,
    "mean": mean,
    "variance": variance,
    "reduce_max": reduce_max,
    "reduce_min": reduce_min,
    "softmax": softmax,
    "cumprod": cumprod,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "concatenate": concatenate,
    "stack": stack,
    "slice": slice_,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv3d": conv3d,
    "conv_transpose3d": conv_transpose3d,
    "upsample_nearest_2d": upsample_nearest_2d,
    "grid_sample_2d": grid_sample_2d,
    "grid_sample_3d": grid_sample_3d,
    "frustum_sample": frustum_sample,
}


def apply_primitive(op, inputs, attrs=None):
    """Apply a catalog primitive by name to a list of input tensors."""
    if op not in PRIMITIVES:
        raise KeyError(f"unknown primitive {op!r}")
    fn = PRIMITIVES[op]
    attrs = dict(attrs or {})
    if op in ("concatenate", "stack"):
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def finite_diff_check(fn, inputs, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a list of Tensors to a scalar Tensor. The relative error of
    one element is |analytic - fd| / max(1, |fd|); the max over all elements
    of all inputs is returned. Run in float64 for meaningful tolerances.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = fn(inputs)
    if out.size != 1:
        raise ShapeError("finite_diff_check expects a scalar-valued fn")
    backward(out)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(inputs).item()
            flat[i] = orig - eps
            lo = fn(inputs).item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named map of trainable tensors with deterministic iteration order."""

    def __init__(self):
        self._params = {}

    def register(self, name, tensor):
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def state_arrays(self):
        """Name -> ndarray view of current values (insertion order)."""
        return {k: v.data for k, v in self._params.items()}

    def load_state_arrays(self, arrays):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter set mismatch: missing={sorted(missing)}"
                           f" extra={sorted(extra)}")
        for k, t in self._params.items():
            arr = np.asarray(arrays[k], dtype=t.dtype)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {k!r} shape {arr.shape} != "
                                 f"{t.shape}")
            t.data = arr.copy()
            t.grad = None
