"""Dense tensors with a small reverse-mode autodiff engine.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back into them. ``backward`` walks
the recorded graph in reverse topological order. The vocabulary is fixed to
what the fusion network needs; it is not a general framework.
"""

import contextlib
import itertools

import numpy as np
from scipy.special import expit

_GRAD_ENABLED = True
_DEBUG_FINITE = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag=True):
    """When on, every op checks its output for NaN/Inf and raises."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self):
        return len(self.data)

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Only scalars may be differentiated without an explicit seed gradient.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by op '{op}'")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _scalar_like(x, ref):
    """Python scalars adopt the dtype of the tensor they combine with."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------
def add(a, b):
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = _scalar_like(b, a)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = _scalar_like(b, a)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = _scalar_like(b, a)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = _scalar_like(b, a)
    out = a.data / b.data

    def bw(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def power(a, p):
    p = float(p)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), bw, "pow")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


# -- activations ----------------------------------------------------------------
def _sigmoid_np(x):
    return expit(x)


def sigmoid(a):
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a):
    s = _sigmoid_np(a.data)
    out = a.data * s

    def bw(g):
        return (g * (s + out * (1.0 - s)),)

    return _make(out, (a,), bw, "silu")


def softplus(a):
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * _sigmoid_np(a.data),), "softplus")


# -- reductions and shape ops ----------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic(idx):
    idx = idx if isinstance(idx, tuple) else (idx,)
    return all(i is Ellipsis or i is None or isinstance(i, (slice, int)) for i in idx)


def getitem(a, idx):
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def gather_rows(x, index):
    """``out[b, i] = x[b, index[b, i]]`` along axis 1 for a [B, L, D] tensor.

    ``index`` rows must be permutations, so the backward is a scatter with
    no collisions.
    """
    index = np.asarray(index)
    if x.ndim != 3 or index.shape != x.shape[:2]:
        raise ValueError(f"gather_rows: index shape {index.shape} does not match tensor {x.shape}")
    idx3 = index[:, :, None]
    out = np.take_along_axis(x.data, idx3, axis=1)

    def bw(g):
        full = np.empty_like(g)
        np.put_along_axis(full, np.broadcast_to(idx3, g.shape), g, axis=1)
        return (full,)

    return _make(out, (x,), bw, "gather_rows")


# -- linear algebra -------------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    D = x.shape[-1]

    def bw(g):
        gxhat = g * gain.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, D).sum(axis=0)
        gbias = g.reshape(-1, D).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw, "layer_norm")


# -- convolutions ----------------------------------------------------------------
def _pad_amounts(ksize, padding):
    if padding == "same":
        for k in ksize:
            if k % 2 == 0:
                raise ValueError(f"'same' padding needs odd kernel extents, got {tuple(ksize)}")
        return [(k // 2, k // 2) for k in ksize]
    if padding == "valid":
        return [(0, 0) for _ in ksize]
    raise ValueError(f"unknown padding {padding!r}")


def depthwise_conv(x, kernel, padding="same"):
    """Per-channel cross-correlation over the trailing spatial axes.

    ``x`` is [..., C, *spatial] and ``kernel`` is [C, *k]; one or two spatial
    axes are supported. Zero padding. Channels never mix.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    nsp = kernel.ndim - 1
    if nsp not in (1, 2) or x.ndim < nsp + 1:
        raise ValueError(f"depthwise_conv: bad shapes {x.shape} / {kernel.shape}")
    C = kernel.shape[0]
    if x.shape[-nsp - 1] != C:
        raise ValueError(f"depthwise_conv: {x.shape[-nsp - 1]} channels vs kernel {kernel.shape}")
    ksize = kernel.shape[1:]
    pads = _pad_amounts(ksize, padding)
    lead = [(0, 0)] * (x.ndim - nsp)
    xp = np.pad(x.data, lead + pads)
    spatial = x.shape[-nsp:]
    out_sp = tuple(s + lo + hi - k + 1 for s, (lo, hi), k in zip(spatial, pads, ksize))
    kshape = (C,) + (1,) * nsp
    offsets = list(itertools.product(*[range(k) for k in ksize]))

    def window(off):
        return (Ellipsis,) + tuple(slice(o, o + n) for o, n in zip(off, out_sp))

    out = np.zeros(x.shape[:-nsp] + out_sp, dtype=np.result_type(x.data, kernel.data))
    for off in offsets:
        out += kernel.data[(slice(None),) + off].reshape(kshape) * xp[window(off)]

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        # channels to the front so each kernel tap reduces to one dot product
        g_c = np.moveaxis(g, -nsp - 1, 0).reshape(C, -1)
        xp_c = np.moveaxis(xp, -nsp - 1, 0)
        for off in offsets:
            w = window(off)
            gxp[w] += kernel.data[(slice(None),) + off].reshape(kshape) * g
            xw = xp_c[w]
            gk[(slice(None),) + off] = np.einsum("cn,cn->c", g_c, np.ascontiguousarray(xw).reshape(C, -1))
        crop = (Ellipsis,) + tuple(slice(lo, lo + s) for (lo, _), s in zip(pads, spatial))
        return gxp[crop], gk

    return _make(out, (x, kernel), bw, "depthwise_conv")


def conv2d(x, weight, bias=None, padding="same"):
    """Dense 2-D cross-correlation. ``x`` [B, Cin, H, W], ``weight`` [Cout, Cin, kh, kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    kh, kw = weight.shape[2:]
    pads = _pad_amounts((kh, kw), padding)
    xp = np.pad(x.data, [(0, 0), (0, 0)] + pads)
    H = xp.shape[2] - kh + 1
    W = xp.shape[3] - kw + 1
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    out = np.zeros((x.shape[0], weight.shape[0], H, W), dtype=np.result_type(x.data, weight.data))
    for i, j in offsets:
        out += np.einsum("bchw,oc->bohw", xp[:, :, i:i + H, j:j + W], weight.data[:, :, i, j], optimize=True)
    parents = [x, weight]
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for i, j in offsets:
            gxp[:, :, i:i + H, j:j + W] += np.einsum("bohw,oc->bchw", g, weight.data[:, :, i, j], optimize=True)
            gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, xp[:, :, i:i + H, j:j + W], optimize=True)
        (t, _), (l, _) = pads
        grads = [gxp[:, :, t:t + x.shape[2], l:l + x.shape[3]], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


# -- finite-difference checking ---------------------------------------------------
def numerical_grad(fn, tensors, h=1e-3):
    """Fourth-order central differences of scalar ``fn()`` w.r.t. each tensor's data.

    The higher-order stencil allows a larger ``h``, which keeps round-off
    small on coordinates whose gradient is tiny.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            f = []
            for step in (2 * h, h, -h, -2 * h):
                flat[i] = orig + step
                f.append(float(fn().data))
            flat[i] = orig
            gflat[i] = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h)
        grads.append(g)
    return grads


def gradcheck(fn, tensors, h=1e-3, rtol=1e-4, floor=1e-8):
    """Compare reverse-mode gradients to finite differences.

    Returns the worst ``|analytic - numeric| / (|numeric| + floor)`` over all
    coordinates; raises ``AssertionError`` if it exceeds ``rtol``.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    with no_grad():
        numeric = numerical_grad(fn, tensors, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / (np.abs(n) + floor)
        worst = max(worst, float(err.max(initial=0.0)))
    if worst >= rtol:
        raise AssertionError(f"gradient check failed: worst relative error {worst:.3e} >= {rtol:g}")
    return worst
