"""Reverse-mode differentiation over a closed set of array primitives.

A :class:`Tensor` wraps a float64 array. Operations on tensors that require
gradients record a node holding references to their parents and a closure that
maps the output cotangent to parent cotangents. :func:`gradients` walks the
recorded graph in reverse topological order.

Supported primitives: elementwise arithmetic with numpy broadcasting, ``exp``,
``log``, ``log1p``, ``sqrt``, ``power`` (constant exponent), ``square``,
``tanh``, ``softplus``, ``relu``, ``sin``, ``cos``, ``clip``, reductions
(``sum``, ``mean``), ``reshape``, indexing, ``take`` along the last axis,
``concat``, ``matmul`` and the affine map :func:`linear`. Custom fused
primitives are built with :func:`make_op`.

Conventions: ``relu`` has derivative 0 at 0; ``clip`` passes the gradient on
the closed interval ``[lo, hi]``; ``power`` with exponent below 1 has
derivative 0 at a zero base.
"""

from contextlib import contextmanager

import numpy as np

_state = {"recording": True}


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    previous = _state["recording"]
    _state["recording"] = False
    try:
        yield
    finally:
        _state["recording"] = previous


def is_recording():
    return _state["recording"]


class Tensor:
    __slots__ = ("value", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __len__(self):
        return len(self.value)

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(value, parents, backward):
    """Create the output node of a primitive.

    ``backward(g)`` must return one cotangent (or ``None``) per parent, each
    with the parent's shape.
    """
    out = Tensor(value)
    if _state["recording"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise binary ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.value + b.value, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.value - b.value, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return make_op(av * bv, (a, b),
                   lambda g: (unbroadcast(g * bv, a.shape), unbroadcast(g * av, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return make_op(out, (a, b),
                   lambda g: (unbroadcast(g / bv, a.shape), unbroadcast(-g * out / bv, b.shape)))


def neg(a):
    a = as_tensor(a)
    return make_op(-a.value, (a,), lambda g: (-g,))


# elementwise unary ----------------------------------------------------------

def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    av = a.value
    return make_op(np.log(av), (a,), lambda g: (g / av,))


def log1p(a):
    a = as_tensor(a)
    av = a.value
    return make_op(np.log1p(av), (a,), lambda g: (g / (1.0 + av),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    a = as_tensor(a)
    av = a.value
    return make_op(av * av, (a,), lambda g: (2.0 * g * av,))


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise TypeError("power supports constant exponents only")
    a = as_tensor(a)
    av = a.value
    p = float(exponent)

    def backward(g):
        if p < 1.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(av == 0.0, 0.0, p * av ** (p - 1.0))
        else:
            d = p * av ** (p - 1.0)
        return (g * d,)

    return make_op(av ** p, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    a = as_tensor(a)
    av = a.value
    return make_op(np.logaddexp(0.0, av), (a,), lambda g: (g * _sigmoid(av),))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def relu(a):
    a = as_tensor(a)
    av = a.value
    return make_op(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))


def sin(a):
    a = as_tensor(a)
    av = a.value
    return make_op(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    a = as_tensor(a)
    av = a.value
    return make_op(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def clip(a, lo, hi):
    a = as_tensor(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return make_op(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# reductions and shape -------------------------------------------------------

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_op(a.value.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return sum_(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return make_op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _has_advanced_index(key):
    if not isinstance(key, tuple):
        key = (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in key)


def getitem(a, key):
    a = as_tensor(a)
    shape = a.shape
    advanced = _has_advanced_index(key)

    def backward(g):
        out = np.zeros(shape)
        if advanced:
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)

    return make_op(a.value[key], (a,), backward)


def take(a, index):
    """Select entries along the last axis; ``index`` must not repeat."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[..., index] = g
        return (out,)

    return make_op(a.value[..., index], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    values = [t.value for t in tensors]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate(values, axis=axis), tuple(tensors), backward)


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    return make_op(np.broadcast_to(a.value, shape), (a,), lambda g: (unbroadcast(g, old),))


# linear algebra -------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul expects operands with at least two dimensions")

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_op(av @ bv, (a, b), backward)


def linear(x, weight, bias=None):
    """Affine map ``y[..., o] = sum_i x[..., i] W[..., i, o] + b[..., o]``.

    A 2-D weight is shared across the batch and uses BLAS. A weight with
    leading batch dimensions (one weight per sample) is contracted by an
    explicit loop over the input index, so every output entry is formed by
    the same sequence of floating-point operations whatever the batch shape.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xv, wv = x.value, weight.value
    n_in, n_out = wv.shape[-2], wv.shape[-1]
    if xv.shape[-1] != n_in:
        raise ValueError(f"linear: input width {xv.shape[-1]} does not match weight rows {n_in}")
    shared = wv.ndim == 2
    if shared:
        out = xv @ wv
    else:
        batch = np.broadcast_shapes(xv.shape[:-1], wv.shape[:-2])
        if n_in == 0:
            out = np.zeros(batch + (n_out,))
        else:
            out = xv[..., 0:1] * wv[..., 0, :]
            for i in range(1, n_in):
                out = out + xv[..., i:i + 1] * wv[..., i, :]
            out = np.broadcast_to(out, batch + (n_out,))

    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.value
        parents.append(bias)

    def backward(g):
        if shared:
            gx = g @ wv.T
            gw = np.zeros((0, n_out)) if n_in == 0 else xv.reshape(-1, n_in).T @ g.reshape(-1, n_out)
        else:
            gx = (g[..., None, :] * wv).sum(axis=-1)
            gw = xv[..., :, None] * g[..., None, :]
        grads = [unbroadcast(gx, x.shape), unbroadcast(gw, weight.shape)]
        if bias is not None:
            grads.append(unbroadcast(g, bias.shape))
        return tuple(grads)

    return make_op(out, tuple(parents), backward)


# driver ---------------------------------------------------------------------

def _topological_order(root):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradients(output, inputs, seed=None):
    """Cotangents of ``output`` with respect to each tensor in ``inputs``.

    ``seed`` is the output cotangent; it defaults to 1 for scalar outputs.
    Inputs that do not influence the output get zero arrays.
    """
    if seed is None:
        if output.size != 1:
            raise ValueError("seed is required for non-scalar outputs")
        seed = np.ones(output.shape)
    seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), output.shape)
    grads = {id(output): seed}
    if output.requires_grad:
        for node in reversed(_topological_order(output)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    return [np.array(np.broadcast_to(grads.get(id(t), 0.0), t.shape)) for t in inputs]


def loss_and_gradient(objective, params):
    """Evaluate a scalar ``objective(Tensor)`` and its exact gradient at ``params``."""
    p = Tensor(np.array(params, dtype=np.float64), requires_grad=True)
    out = objective(p)
    (grad,) = gradients(out, [p])
    return float(out.value), grad
