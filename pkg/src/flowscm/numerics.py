"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small engine: only the primitives the model family in this
package needs (dense affine layers, elementwise nonlinearities, block
slicing, reductions, and a couple of structured ops for kernel
statistics). Broadcasting is restricted to scalar operands, row-vector
bias addition, and an explicit outer sum so every gradient rule stays
auditable.

Gradients are accumulated: repeated backward calls without resetting
add their contributions, and a tensor used twice in one graph receives
the sum of both paths.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_STACK = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    _GRAD_STACK.append(False)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


def grad_enabled() -> bool:
    return _GRAD_STACK[-1]


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``grad`` holds the accumulated gradient after backward. Non-leaf
    tensors produced while recording keep closures to their parents;
    backward walks the graph once in reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._grad_fn = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(node) into every reachable node's grad."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._grad_fn is None and not self.requires_grad:
            raise ValueError("tensor is not on the compute graph")
        order = _toposort(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._grad_fn is None:
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                held = pending.get(key)
                pending[key] = pg if held is None else held + pg

    # -- operator sugar ------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_int(self, p)

    # -- method forms of the common ops --------------------------------
    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def softplus(self):
        return softplus(self)

    def leaky_relu(self, slope: float = 0.01):
        return leaky_relu(self, slope)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def narrow(self, axis: int, start: int, length: int):
        return narrow(self, axis, start, length)


def _toposort(root: Tensor):
    """Post-order over the graph; parents always precede their users."""
    order = []
    seen = set()
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents, grad_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _shrink_to(g: np.ndarray, shape) -> np.ndarray:
    """Collapse a gradient back to a size-1 operand's shape."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- arithmetic ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")

    def grad_fn(g):
        return _shrink_to(g, a.shape), _shrink_to(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")

    def grad_fn(g):
        return _shrink_to(g, a.shape), _shrink_to(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")

    def grad_fn(g):
        return _shrink_to(g * b.data, a.shape), _shrink_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("div produced a non-finite value")

    def grad_fn(g):
        return (
            _shrink_to(g / b.data, a.shape),
            _shrink_to(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        return (-g,)

    return _result(-a.data, (a,), grad_fn)


def pow_int(a, p: int) -> Tensor:
    a = as_tensor(a)
    if not isinstance(p, int) or p < 2:
        raise ValueError(f"pow_int expects an integer exponent >= 2, got {p!r}")

    def grad_fn(g):
        return (g * p * a.data ** (p - 1),)

    return _result(a.data**p, (a,), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), grad_fn)


def add_bias(x, b) -> Tensor:
    """Row-vector bias addition: (n, m) + (m,)."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")

    def grad_fn(g):
        return g, g.sum(axis=0)

    return _result(x.data + b.data[None, :], (x, b), grad_fn)


def outer_add(u, v) -> Tensor:
    """Explicit outer sum: out[i, j] = u[i] + v[j]."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise ValueError(f"outer_add expects 1-D operands, got {u.shape} and {v.shape}")

    def grad_fn(g):
        return g.sum(axis=1), g.sum(axis=0)

    return _result(u.data[:, None] + v.data[None, :], (u, v), grad_fn)


# -- elementwise nonlinearities -----------------------------------------
def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), grad_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("exp overflow to non-finite value")

    def grad_fn(g):
        return (g * out,)

    return _result(out, (a,), grad_fn)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError(f"log of non-positive input (min={a.data.min()!r})")

    def grad_fn(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), grad_fn)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError(f"sqrt of non-positive input (min={a.data.min()!r})")
    out = np.sqrt(a.data)

    def grad_fn(g):
        return (g * 0.5 / out,)

    return _result(out, (a,), grad_fn)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def grad_fn(g):
        # sigmoid via tanh keeps it stable for large |x|
        return (g * 0.5 * (1.0 + np.tanh(0.5 * a.data)),)

    return _result(out, (a,), grad_fn)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    out = np.where(a.data > 0.0, a.data, slope * a.data)

    def grad_fn(g):
        return (g * np.where(a.data > 0.0, 1.0, slope),)

    return _result(out, (a,), grad_fn)


# -- reductions ---------------------------------------------------------
def _reduce_grad(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g.reshape(()), shape)
    if axis == 0:
        return np.broadcast_to(g[None, :], shape)
    return np.broadcast_to(g[:, None], shape)


def _check_axis(a: Tensor, axis, op: str):
    if axis is None:
        return
    if a.ndim != 2 or axis not in (0, 1):
        raise ValueError(f"{op}: axis {axis!r} invalid for shape {a.shape}")


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "sum")
    shape = a.shape

    def grad_fn(g):
        return (_reduce_grad(np.asarray(g, dtype=np.float64), shape, axis),)

    return _result(a.data.sum(axis=axis), (a,), grad_fn)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "mean")
    shape = a.shape
    count = a.size if axis is None else shape[axis]

    def grad_fn(g):
        return (_reduce_grad(np.asarray(g, dtype=np.float64), shape, axis) / count,)

    return _result(a.data.mean(axis=axis), (a,), grad_fn)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    d = sub(a, b)
    return tmean(mul(d, d))


# -- shape ops ----------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), grad_fn)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got {a.shape}")

    def grad_fn(g):
        return (g.T.copy(),)

    return _result(a.data.T.copy(), (a,), grad_fn)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient scatters back into place."""
    a = as_tensor(a)
    if a.ndim != 2 or axis not in (0, 1):
        raise ValueError(f"narrow: axis {axis!r} invalid for shape {a.shape}")
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ValueError(f"narrow: window [{start}, {start + length}) outside shape {a.shape}")
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=np.float64)
        if axis == 0:
            full[start : start + length, :] = g
        else:
            full[:, start : start + length] = g
        return (full,)

    if axis == 0:
        data = a.data[start : start + length, :].copy()
    else:
        data = a.data[:, start : start + length].copy()
    return _result(data, (a,), grad_fn)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    if any(t.ndim != tensors[0].ndim for t in tensors):
        raise ValueError(f"concat: rank mismatch {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def select(a, indices) -> Tensor:
    """Gather entries of the flattened tensor; gradient scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= a.size:
        raise ValueError(f"select: indices out of range for size {a.size}")
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(int(np.prod(shape)), dtype=np.float64)
        np.add.at(full, idx, g)
        return (full.reshape(shape),)

    return _result(a.data.reshape(-1)[idx].copy(), (a,), grad_fn)


def tril(a, k: int = 0) -> Tensor:
    """Zero out entries above the k-th diagonal."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"tril expects a 2-D tensor, got {a.shape}")
    mask = np.tril(np.ones(a.shape), k=k)

    def grad_fn(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), grad_fn)


def tril_mask(n: int, k: int = 0) -> Tensor:
    return Tensor(np.tril(np.ones((n, n)), k=k))


# -- gradient verification ----------------------------------------------
def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild its graph from the live contents of ``x.data`` on
    every call; the numeric pass perturbs ``x.data`` in place. Relative
    error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    was_required = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        loss = f(x)
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ValueError("grad_check needs f to return a scalar tensor")
        loss.backward()
        if x.grad is None:
            raise ValueError("x received no gradient; is it used by f?")
        analytic = x.grad.reshape(-1).copy()
        flat = x.data.reshape(-1)
        numeric = np.empty_like(analytic)
        with no_grad():
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h
                hi = float(f(x).data.reshape(()))
                flat[i] = saved - h
                lo = float(f(x).data.reshape(()))
                flat[i] = saved
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise FloatingPointError(f"non-finite loss while perturbing coordinate {i}")
                numeric[i] = (hi - lo) / (2.0 * h)
    finally:
        x.requires_grad = was_required
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(rel.max())
