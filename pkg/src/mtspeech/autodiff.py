"""Minimal reverse-mode differentiation over dense numpy arrays.

Every primitive records its inputs and a backward closure on the output
tensor.  ``grad`` walks the recorded graph once in reverse topological
order and then releases it (a graph is single-use).  ``finite_difference``
is the central-difference oracle used by the test-suite.

Precision follows the dtype of the inputs: float64 for oracle checks,
float32 for training runs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "grad",
    "backward",
    "finite_difference",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "conv1d",
    "layer_norm",
    "gelu",
    "softmax",
    "log_softmax",
    "exp",
    "log",
    "xlogx",
    "sqrt",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take",
    "index",
    "where",
    "cosine_similarity",
    "one_hot",
    "straight_through",
]

CHECK_FINITE = True


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible input shapes."""

    def __init__(self, op, detail):
        super().__init__(f"{op}: {detail}")
        self.op = op


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or gradient contains NaN/Inf."""

    def __init__(self, op, where):
        super().__init__(f"non-finite {where} at node '{op}'")
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, dtype={self.dtype})"

    __array_priority__ = 100

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op, value, parents, backward):
    out = Tensor(value)
    out.op = op
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(op, "forward value")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ----------------------------------------------------------------------------
# graph traversal
# ----------------------------------------------------------------------------


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def grad(loss, wrt, retain_graph=False):
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors not on a path to ``loss`` get an exact zero gradient.  The
    graph is released afterwards unless ``retain_graph`` is set.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if CHECK_FINITE and not np.all(np.isfinite(pg)):
                raise NonFiniteError(node.op, "gradient")
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    if not retain_graph:
        for node in order:
            node._parents = ()
            node._backward = None
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else g.reshape(t.shape))
    return out


def backward(loss, params):
    """Run ``grad`` and store results on ``.grad`` of each parameter; returns a name->grad map
    when params is a dict, else a list."""
    if isinstance(params, dict):
        names = list(params)
        gs = grad(loss, [params[n] for n in names])
        for n, g in zip(names, gs):
            params[n].grad = g
        return dict(zip(names, gs))
    gs = grad(loss, list(params))
    for p, g in zip(params, gs):
        p.grad = g
    return gs


def finite_difference(f, x, step=1e-5):
    """Central-difference gradient of scalar function ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x.copy()))
        flat[i] = orig - step
        fm = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def xlogx(a):
    """Elementwise x*log(x) with the 0*log(0) = 0 convention."""
    ad = a.data
    pos = ad > 0
    safe = np.where(pos, ad, 1.0)
    out = np.where(pos, ad * np.log(safe), 0.0).astype(ad.dtype)
    tiny = np.finfo(ad.dtype).tiny
    return _record("xlogx", out, (a,), lambda g: (g * (np.log(np.maximum(ad, tiny)) + 1.0),))


def gelu(a):
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = (x * cdf).astype(x.dtype)

    def back(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return _record("gelu", out, (a,), back)


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; cond is a constant boolean array."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.data, b.data)
    return _record("where", out, (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                              _unbroadcast(np.where(cond, 0.0, g), sb)))


def straight_through(hard, soft):
    """Forward value ``hard`` (a constant), backward passes the gradient to ``soft``.

    The backward is the Jacobian of ``hard + soft - stop_gradient(soft)``,
    not of the forward value itself.
    """
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError("straight_through", f"hard {hard.shape} vs soft {soft.shape}")
    return _record("straight_through", hard.copy(), (soft,), lambda g: (g,))


# ----------------------------------------------------------------------------
# reductions and reshaping
# ----------------------------------------------------------------------------


def sum(a, axis=None, keepdims=False):
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {old} into {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", out, tuple(tensors), back)


def take(a, indices, axis=0):
    """Gather along ``axis`` with a constant integer index array."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ShapeError("take", f"index out of range for axis of size {a.shape[axis]}")
    shape = a.shape
    out = np.take(a.data, idx, axis=axis)

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _record("take", out, (a,), back)


def index(a, key):
    """Basic slicing (no fancy indexing; use ``take`` for gathers)."""
    shape = a.shape
    out = a.data[key]

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _record("index", np.array(out), (a,), back)


def one_hot(indices, depth, dtype=np.float64):
    """Constant one-hot encoding (no gradient)."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.zeros(idx.shape + (depth,), dtype=dtype)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return Tensor(out)


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------


def matmul(a, b):
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", ad @ bd, (a, b), back)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x`` (leading dims flattened)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", f"input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (wd.shape[1],))

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _record("linear", out, parents, back)


def conv1d(x, w, b=None, stride=1, padding=0, groups=1):
    """Valid (optionally zero-padded) 1-D convolution over time.

    x: (L, C_in) time-major; w: (C_out, C_in // groups, K); returns (T, C_out)
    with T = floor((L + 2*padding - K) / stride) + 1.
    """
    L, c_in = x.shape
    c_out, c_per, k = w.shape
    if c_in % groups or c_out % groups or c_per != c_in // groups:
        raise ShapeError("conv1d", f"channels {c_in}->{c_out} incompatible with weight {w.shape}, groups={groups}")
    L_pad = L + 2 * padding
    if L_pad < k:
        raise ShapeError("conv1d", f"input length {L} (padding {padding}) shorter than kernel {k}")
    T = (L_pad - k) // stride + 1
    xd = x.data
    if padding:
        xd = np.pad(xd, ((padding, padding), (0, 0)))
    # patches: (T, C_in, K)
    patches = np.lib.stride_tricks.sliding_window_view(xd, k, axis=0)[::stride]
    cin_g, cout_g = c_in // groups, c_out // groups
    if groups == 1:
        cols = patches.reshape(T, c_in * k)
        wmat = w.data.reshape(c_out, c_in * k)
        out = cols @ wmat.T
    else:
        pg = patches.reshape(T, groups, cin_g, k).transpose(1, 0, 2, 3).reshape(groups, T, cin_g * k)
        wg = w.data.reshape(groups, cout_g, cin_g * k)
        out = np.matmul(pg, wg.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(T, c_out)
    if b is not None:
        out = out + b.data

    def back(g):
        if groups == 1:
            gw = (g.T @ cols).reshape(w.shape)
            gcols = (g @ wmat).reshape(T, c_in, k)
        else:
            gg = g.reshape(T, groups, cout_g).transpose(1, 0, 2)
            gw = np.matmul(gg.transpose(0, 2, 1), pg).reshape(w.shape)
            gcols = np.matmul(gg, wg).reshape(groups, T, cin_g, k).transpose(1, 0, 2, 3).reshape(T, c_in, k)
        gx = np.zeros((L_pad, c_in), dtype=g.dtype)
        span = stride * (T - 1) + 1
        for j in range(k):
            gx[j:j + span:stride] += gcols[:, :, j]
        if padding:
            gx = gx[padding:padding + L]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _record("conv1d", out, parents, back)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", f"feature dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _record("layer_norm", out, (x, gamma, beta), back)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), back)


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (a,), back)


def cosine_similarity(a, b, eps=1e-8):
    """Cosine similarity over the last axis with broadcasting of leading dims."""
    _check_broadcast("cosine_similarity", a, b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("cosine_similarity", f"feature dims differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=-1, keepdims=True))
    na = np.maximum(na, eps)
    nb = np.maximum(nb, eps)
    dot = (ad * bd).sum(axis=-1, keepdims=True)
    cos = dot / (na * nb)

    def back(g):
        g = g[..., None]
        ga = g * (bd / (na * nb) - cos * ad / (na * na))
        gb = g * (ad / (na * nb) - cos * bd / (nb * nb))
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("cosine_similarity", cos[..., 0], (a, b), back)
