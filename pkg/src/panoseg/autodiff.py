"""Reverse-mode automatic differentiation on dense numpy arrays.

A `Tensor` wraps a float64 ndarray plus the bookkeeping needed to replay
the chain rule: the producing operator tag, references to parent nodes,
and a closure that scatters an incoming gradient to those parents.
`backward()` runs a single topological pass from a scalar root, so every
node is visited at most once regardless of graph shape.

Values are float64 end to end; reductions therefore accumulate in 64-bit.
Checkpoints downcast to float32 on disk (see `checkpoint`).

A graph is single-writer: build, execute and backpropagate it from one
logical thread. Distinct graphs (separate model replicas) may run
concurrently, and parameter arrays may be shared read-only between
forward-only evaluators.
"""

from __future__ import annotations

import contextlib

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Operand shapes do not conform to the operator contract."""


class GraphError(AutodiffError):
    """Backward invoked on an ill-formed root (e.g. non-scalar)."""


class NumericError(AutodiffError):
    """A NaN gradient or non-finite update was detected."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, c):
        return pow_const(self, c)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward):
    """Wrap an ndarray as a node, pruning graph edges when grads are off."""
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    out = Tensor(data, requires_grad=True, op=op, parents=tuple(parents))
    out._backward = backward
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root, params=()):
    """Backpropagate from a scalar root through every reachable node.

    Gradients accumulate into `.grad` of all requires_grad tensors. Any
    tensor in `params` left untouched (unreachable from the root) gets an
    explicit zero gradient so optimizers see a complete set.
    """
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")

    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    if root.grad is None:
        root.grad = np.zeros_like(root.data)
    root.grad += np.ones_like(root.data)

    for node in reversed(topo):
        if node.grad is None or node._backward is None:
            continue
        if np.isnan(node.grad).any():
            raise NumericError(f"NaN gradient at output of operator '{node.op}'")
        node._backward(node.grad)

    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def zero_grads(params):
    for p in params:
        p.grad = None


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, "add", (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out, "sub", (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, "div", (a, b), bw)


def neg(a):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, "neg", (a,), bw)


def pow_const(a, c):
    a = as_tensor(a)
    c = float(c)
    out = a.data**c

    def bw(g):
        _accumulate(a, g * c * a.data ** (c - 1.0))

    return _make(out, "pow", (a,), bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out)

    return _make(out, "exp", (a,), bw)


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)

    def bw(g):
        _accumulate(a, g / a.data)

    return _make(out, "log", (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_np(a.data)

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, "sigmoid", (a,), bw)


def silu(a):
    """x * sigmoid(x), composed from primitives."""
    return mul(a, sigmoid(a))


def clip(a, lo, hi):
    """Componentwise clamp. `lo`/`hi` are constants (scalar or broadcastable).

    Gradient passes through wherever the input was not clipped.
    """
    a = as_tensor(a)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    out = np.clip(a.data, lo, hi)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)

    def bw(g):
        _accumulate(a, g * inside)

    return _make(out, "clip", (a,), bw)


# -- shape manipulation -----------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(out, "reshape", (a,), bw)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bw(g):
        _accumulate(a, g.transpose(inv))

    return _make(out, "transpose", (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            _accumulate(t, g[tuple(idx)])

    return _make(out, "concat", tuple(tensors), bw)


# -- reductions -------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            gg = np.expand_dims(gg, ax)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out, "sum", (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[i] for i in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(out, "matmul", (a, b), bw)


# -- softmax / normalization ------------------------------------------------


def _softmax_np(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid_np(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softmax(a, axis):
    a = as_tensor(a)
    out = _softmax_np(a.data, axis)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - dot) * out)

    return _make(out, "softmax", (a,), bw)


def layer_norm(a, gamma, beta, axis=1, eps=1e-6):
    """Normalize over `axis`, then apply a per-channel affine.

    Epsilon is added to the variance; a constant input therefore maps to
    zeros before the affine terms.
    """
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    if a.data.shape[axis] != gamma.data.size or gamma.data.shape != beta.data.shape:
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match axis "
            f"{axis} of input {a.shape}"
        )
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    gshape = [1] * a.data.ndim
    gshape[axis] = gamma.data.size
    gam = gamma.data.reshape(gshape)
    bet = beta.data.reshape(gshape)
    out = xhat * gam + bet

    def bw(g):
        other = tuple(i for i in range(a.data.ndim) if i != axis)
        _accumulate(gamma, (g * xhat).sum(axis=other).reshape(gamma.data.shape))
        _accumulate(beta, g.sum(axis=other).reshape(beta.data.shape))
        gx = g * gam
        m1 = gx.mean(axis=axis, keepdims=True)
        m2 = (gx * xhat).mean(axis=axis, keepdims=True)
        _accumulate(a, (gx - m1 - xhat * m2) * inv)

    return _make(out, "layer_norm", (a, gamma, beta), bw)


# -- convolution / pooling / resampling --------------------------------------


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2D cross-correlation over NCHW input with OIHW weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} and {w.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    sy, sx = _pair(stride)
    py, px = _pair(padding)
    n, cin, h, wd = x.data.shape
    cout, _, kh, kw = w.data.shape
    ho = (h + 2 * py - kh) // sy + 1
    wo = (wd + 2 * px - kw) // sx + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (py, py), (px, px)))
    # im2col by kernel-tap slicing: cols[(ky,kx)] is the input under that tap.
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = xp[:, :, ky : ky + ho * sy : sy, kx : kx + wo * sx : sx]
    cols2 = cols.reshape(n, cin * kh * kw, ho * wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols2).reshape(n, cout, ho, wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
        out = out + b.data.reshape(1, cout, 1, 1)
        parents.append(b)

    def bw(g):
        gflat = g.reshape(n, cout, ho * wo)
        gw = np.einsum("nop,ncp->oc", gflat, cols2, optimize=True)
        _accumulate(w, gw.reshape(w.data.shape))
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        gcols = np.matmul(wmat.T, gflat).reshape(n, cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for ky in range(kh):
            for kx in range(kw):
                gxp[:, :, ky : ky + ho * sy : sy, kx : kx + wo * sx : sx] += gcols[:, :, ky, kx]
        _accumulate(x, gxp[:, :, py : py + h, px : px + wd])

    return _make(out, "conv2d", tuple(parents), bw)


def avg_pool2d(x, kernel, stride=None, padding=0):
    """Average pooling; padded cells count toward the divisor."""
    x = as_tensor(x)
    ky, kx = _pair(kernel)
    sy, sx = _pair(stride if stride is not None else kernel)
    py, px = _pair(padding)
    n, c, h, w = x.data.shape
    ho = (h + 2 * py - ky) // sy + 1
    wo = (w + 2 * px - kx) // sx + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (py, py), (px, px)))
    acc = np.zeros((n, c, ho, wo), dtype=np.float64)
    for iy in range(ky):
        for ix in range(kx):
            acc += xp[:, :, iy : iy + ho * sy : sy, ix : ix + wo * sx : sx]
    out = acc / (ky * kx)

    def bw(g):
        gs = g / (ky * kx)
        gxp = np.zeros_like(xp)
        for iy in range(ky):
            for ix in range(kx):
                gxp[:, :, iy : iy + ho * sy : sy, ix : ix + wo * sx : sx] += gs
        _accumulate(x, gxp[:, :, py : py + h, px : px + w])

    return _make(out, "avg_pool2d", (x,), bw)


def global_avg_pool(x):
    """Mean over the spatial extent of NCHW input -> (N, C)."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy())

    return _make(out, "global_avg_pool", (x,), bw)


def _interp_matrix(n_out, n_in):
    """Dense 1-D bilinear interpolation matrix, pixel-center convention."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    f = np.clip(src - np.floor(src), 0.0, 1.0)
    f[src < 0] = 0.0
    np.add.at(m, (np.arange(n_out), i0), 1.0 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def upsample_bilinear(x, size):
    """Resize NCHW input to spatial `size` with separable bilinear weights."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    ho, wo = size
    if (ho, wo) == (h, w):
        def bw_id(g):
            _accumulate(x, g)

        return _make(x.data.copy(), "upsample_bilinear", (x,), bw_id)
    my = _interp_matrix(ho, h)
    mx = _interp_matrix(wo, w)
    out = np.einsum("oh,nchw,pw->ncop", my, x.data, mx, optimize=True)

    def bw(g):
        _accumulate(x, np.einsum("oh,ncop,pw->nchw", my, g, mx, optimize=True))

    return _make(out, "upsample_bilinear", (x,), bw)


def grid_sample(x, grid):
    """Bilinear sampling of NCHW input at absolute pixel coordinates.

    `grid` has shape (N, Ho, Wo, 2) holding (row, col) positions. Samples
    outside the image contribute zero, and the gradient flows to both the
    input values and the coordinates, which is what lets offset predictors
    train through the sampler.
    """
    x, grid = as_tensor(x), as_tensor(grid)
    if x.data.ndim != 4 or grid.data.ndim != 4 or grid.data.shape[-1] != 2:
        raise ShapeError(f"grid_sample expects NCHW input and (N,Ho,Wo,2) grid, got {x.shape} and {grid.shape}")
    if x.data.shape[0] != grid.data.shape[0]:
        raise ShapeError(f"grid_sample batch mismatch: input {x.shape} vs grid {grid.shape}")
    n, c, h, w = x.data.shape
    _, ho, wo, _ = grid.data.shape

    # Coordinates further than one cell outside never contribute; clip them
    # to a thin margin so the zero-padded frame below stays small.
    gy = np.clip(grid.data[..., 0].ravel(), -2.0, h + 1.0)
    gx = np.clip(grid.data[..., 1].ravel(), -2.0, w + 1.0)
    y0f = np.floor(gy)
    x0f = np.floor(gx)
    fy = (gy - y0f)[:, None]
    fx = (gx - x0f)[:, None]

    # Zero-pad just enough that every corner index lands inside the padded
    # frame; out-of-range samples then read (and write) real zeros.
    if gy.size:
        pad_top = max(0, int(-y0f.min()))
        pad_bot = max(0, int(y0f.max()) + 2 - h)
        pad_left = max(0, int(-x0f.min()))
        pad_right = max(0, int(x0f.max()) + 2 - w)
    else:
        pad_top = pad_bot = pad_left = pad_right = 0
    hp = h + pad_top + pad_bot
    wp = w + pad_left + pad_right
    xp = np.zeros((n, hp, wp, c), dtype=np.float64)
    xp[:, pad_top : pad_top + h, pad_left : pad_left + w] = x.data.transpose(0, 2, 3, 1)
    flat = xp.reshape(n * hp * wp, c)

    y0 = y0f.astype(np.int64) + pad_top
    x0 = x0f.astype(np.int64) + pad_left
    base = np.repeat(np.arange(n, dtype=np.int64) * (hp * wp), ho * wo)
    i00 = base + y0 * wp + x0
    i01 = i00 + 1
    i10 = i00 + wp
    i11 = i10 + 1

    corners = flat[np.stack((i00, i01, i10, i11))]  # (4, P, c)
    v00, v01, v10, v11 = corners
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = (v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11)
    out = out.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c)
        if x.requires_grad:
            idx = np.concatenate((i00, i01, i10, i11))
            size = n * hp * wp
            contrib = np.concatenate((gt * w00, gt * w01, gt * w10, gt * w11))
            if c <= 4:
                gacc = np.empty((size, c), dtype=np.float64)
                for ch in range(c):
                    gacc[:, ch] = np.bincount(idx, weights=contrib[:, ch], minlength=size)
            else:
                idx2 = (idx[:, None] * c + np.arange(c)).ravel()
                gacc = np.bincount(idx2, weights=contrib.ravel(), minlength=size * c).reshape(size, c)
            gacc = gacc.reshape(n, hp, wp, c)[:, pad_top : pad_top + h, pad_left : pad_left + w]
            _accumulate(x, gacc.transpose(0, 3, 1, 2))
        if grid.requires_grad:
            dy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
            dx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
            gg = np.stack(((gt * dy).sum(axis=-1), (gt * dx).sum(axis=-1)), axis=-1)
            _accumulate(grid, gg.reshape(n, ho, wo, 2))

    return _make(out, "grid_sample", (x, grid), bw)


# -- losses -------------------------------------------------------------------


def cross_entropy(logits, labels, ignore_index=255):
    """Mean negative log-likelihood over non-ignored pixels.

    `logits` is (N, K, ...) and `labels` an integer array of shape
    (N, ...). Uses a fused log-softmax for stability. Returns 0 when every
    pixel is ignored.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if labels.shape != logits.data.shape[:1] + logits.data.shape[2:]:
        raise ShapeError(f"cross_entropy labels shape {labels.shape} does not match logits {logits.shape}")
    k = logits.data.shape[1]
    valid = labels != ignore_index
    if (labels[valid] >= k).any() or (labels[valid] < 0).any():
        raise ShapeError(f"cross_entropy labels out of range [0, {k})")
    n_valid = int(valid.sum())
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    safe_labels = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe_labels[:, None], axis=1)[:, 0]
    if n_valid == 0:
        out = np.float64(0.0)
    else:
        out = -(picked * valid).sum() / n_valid

    def bw(g):
        if n_valid == 0:
            return
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_labels[:, None], 1.0, axis=1)
        gx = (p - onehot) * valid[:, None] / n_valid
        _accumulate(logits, g * gx)

    return _make(np.asarray(out), "cross_entropy", (logits,), bw)


def kl_div(log_p, q, axis=1):
    """Pointwise KL(q || p) summed over `axis`, from log p and q.

    Matches the distillation convention: the first argument is a
    log-distribution, the second a distribution. Zero entries in q
    contribute zero.
    """
    log_p, q = as_tensor(log_p), as_tensor(q)
    if log_p.data.shape != q.data.shape:
        raise ShapeError(f"kl_div shapes differ: {log_p.shape} vs {q.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        logq = np.where(q.data > 0, np.log(q.data), 0.0)
    terms = q.data * (logq - log_p.data)
    out = terms.sum(axis=axis)

    def bw(g):
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        gg = np.expand_dims(g, ax)
        _accumulate(log_p, np.broadcast_to(gg, log_p.data.shape) * (-q.data))
        if q.requires_grad:
            _accumulate(q, np.broadcast_to(gg, q.data.shape) * (logq + 1.0 - log_p.data))

    return _make(out, "kl_div", (log_p, q), bw)
