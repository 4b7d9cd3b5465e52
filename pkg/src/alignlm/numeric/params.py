"""Named parameter collections, reverse-mode evaluation and finite differences."""

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .tensor import Tensor


class ParamSet:
    """Ordered map ``dotted.name -> ndarray`` with a trainable flag per entry."""

    def __init__(self):
        self._values = {}
        self._trainable = {}

    def add(self, name, value, trainable=True):
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, copy=True)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value in parameter '{name}'")
        self._values[name] = value
        self._trainable[name] = bool(trainable)

    def __getitem__(self, name):
        return self._values[name]

    def __setitem__(self, name, value):
        old = self._values[name]
        value = np.asarray(value, dtype=old.dtype)
        if value.shape != old.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {old.shape}")
        self._values[name] = value

    def __contains__(self, name):
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def is_trainable(self, name):
        return self._trainable[name]

    def trainable_names(self):
        return [n for n, t in self._trainable.items() if t]

    def set_trainable(self, prefixes, trainable=True):
        """Set the flag on every parameter whose name starts with one of ``prefixes``."""
        if isinstance(prefixes, str):
            prefixes = (prefixes,)
        for name in self._values:
            if any(name.startswith(p) for p in prefixes):
                self._trainable[name] = bool(trainable)

    def freeze_all(self):
        for name in self._trainable:
            self._trainable[name] = False

    def copy(self):
        out = ParamSet()
        for name, value in self._values.items():
            out.add(name, value, self._trainable[name])
        return out

    def as_tensors(self):
        """Leaf tensors for one graph evaluation; frozen entries carry no gradient."""
        return {
            name: Tensor(value, requires_grad=self._trainable[name], name=name)
            for name, value in self._values.items()
        }

    def num_elements(self):
        return int(sum(v.size for v in self._values.values()))


def forward_backward(graph_fn, params, *inputs):
    """Evaluate ``graph_fn(tensors, *inputs)`` and differentiate it.

    Returns ``(loss, grads)`` where ``grads`` holds one array per trainable
    parameter; parameters the loss does not depend on get zeros.
    """
    leaves = params.as_tensors()
    loss = graph_fn(leaves, *inputs)
    if loss.data.size != 1:
        raise ShapeError(f"graph_fn must return a scalar, got shape {loss.shape}")
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError("non-finite loss")
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for name in params.trainable_names():
        g = leaves[name].grad
        grads[name] = np.zeros_like(params[name]) if g is None else g
    return value, grads


def finite_difference_grad(scalar_fn, params, epsilon=1e-6):
    """Central-difference gradient of ``scalar_fn(params)`` for each trainable entry.

    ``params`` is perturbed in place one entry at a time and restored exactly.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out = {}
    for name in params.trainable_names():
        value = params[name]
        flat = value.reshape(-1)
        grad = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = scalar_fn(params)
            flat[i] = orig - epsilon
            f_minus = scalar_fn(params)
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * epsilon)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite finite-difference gradient for '{name}'")
        out[name] = grad.reshape(value.shape)
    return out


def max_relative_error(grads_a, grads_b):
    """Largest per-parameter ``max|a-b| / max(max|a|, max|b|)``; 0 when both are zero."""
    worst = 0.0
    for name in grads_a:
        a, b = np.asarray(grads_a[name]), np.asarray(grads_b[name])
        scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
        diff = np.abs(a - b).max(initial=0.0)
        if scale == 0.0:
            if diff != 0.0:
                return float("inf")
            continue
        worst = max(worst, diff / scale)
    return worst
