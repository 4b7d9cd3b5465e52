"""A small reverse-mode autodiff tensor over numpy arrays.

Only the primitives the scoring model needs are provided: matmul, broadcast
add/sub/mul, silu, softmax (with boolean masking), log-softmax, RMS
normalisation, embedding lookup, reductions, concatenation, indexing,
reshape and transpose.  Every op checks its output for NaN/Inf and raises
:class:`NonFiniteError` naming the op, and ``backward`` does the same for
gradients.

Graph nodes are only recorded when at least one input requires a gradient,
so inference runs without building a tape.
"""

import numpy as np
from scipy.special import expit

from ..errors import NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float64


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value at node '{where}'")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        _check_finite(arr, name or "leaf")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._op = "leaf"
        self._parents = ()
        self._backward = None

    # construction of interior nodes -----------------------------------------
    @classmethod
    def _make(cls, data, op, parents, backward):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # basic protocol ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        label = self.name or self._op
        return f"Tensor({label}, shape={self.data.shape})"

    # operators ----------------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a supported primitive")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # reverse pass -----------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
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
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, f"grad of {node.name or node._op}")
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


# elementwise -----------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def silu(x):
    x = as_tensor(x)
    s = expit(x.data)
    xd = x.data
    return Tensor._make(xd * s, "silu", (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


# linear algebra ----------------------------------------------------------------
def matmul(a, b):
    """numpy ``matmul`` semantics, including 1-D operands and batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def backward(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        if ad.ndim == 1 and bd.ndim == 1:
            g2 = np.reshape(g, (1, 1))
        elif ad.ndim == 1:
            g2 = np.expand_dims(g, -2)
        elif bd.ndim == 1:
            g2 = np.expand_dims(g, -1)
        else:
            g2 = g
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if bd.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(np.matmul(ad, bd), "matmul", (a, b), backward)


# normalisation / softmax -----------------------------------------------------
def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0.

    Every softmax row must keep at least one unmasked entry.
    """
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        if not np.all(mask.any(axis=axis)):
            raise ShapeError("softmax mask leaves an empty row")
        xm = np.where(mask, xd, -np.inf)
    else:
        xm = xd
    e = np.exp(xm - xm.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, "softmax", (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return Tensor._make(
        out, "log_softmax", (x,),
        lambda g: (g - p * g.sum(axis=axis, keepdims=True),),
    )


def rms_norm(x, gain, eps=1e-6):
    """``x / sqrt(mean(x**2, -1) + eps) * gain`` over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    xd, gd = x.data, gain.data
    n = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, gd.shape)

    return Tensor._make(xhat * gd, "rms_norm", (x, gain), backward)


# indexing / shape ----------------------------------------------------------------
def embedding(table, ids):
    """Row lookup ``table[ids]`` with scatter-add gradient."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    td = table.data

    def backward(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, td.shape[-1]))
        return (gt,)

    return Tensor._make(td[ids], "embedding", (table,), backward)


def getitem(x, index):
    x = as_tensor(x)
    xd = x.data

    def backward(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor._make(np.array(xd[index]), "getitem", (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return Tensor._make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._make(
        np.transpose(x.data, axes), "transpose", (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), backward
    )


# reductions ----------------------------------------------------------------------
def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), "sum", (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)
