"""Minimal tape-based reverse-mode differentiation over dense float64 arrays.

Each primitive returns a new :class:`Tensor`; when any operand requires a
gradient the result keeps references to its parents and a closure mapping the
output cotangent to parent cotangents. :func:`backward` orders the recorded
graph topologically (the :class:`Tape`) and replays it in reverse.

Broadcasting is deliberately restricted: elementwise binary ops accept either
identical shapes or a 0-d operand. Anything else must go through
:func:`broadcast_to` explicitly.
"""

import contextlib
import threading

import numpy as np

from .exceptions import DetachedRoot, NotScalar, ShapeMismatch

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection ------------------------------------------------------
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
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar -----------------------------------------------------
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
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(t):
    """Same values, cut from the graph."""
    return Tensor(as_tensor(t).data)


def _node(data, parents, backward, op):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


# -- tape ---------------------------------------------------------------------
class Tape:
    """Topologically ordered record of the graph feeding ``root``."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
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
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def backward(self, root, seed=None):
        grads = {id(root): np.ones_like(root.data) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(root):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if not isinstance(root, Tensor):
        raise DetachedRoot("root is not a Tensor")
    if root.size != 1:
        raise NotScalar(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise DetachedRoot("root is not connected to any tensor requiring grad")
    Tape.from_root(root).backward(root)


# -- elementwise binary -------------------------------------------------------
def _binary_shapes(a, b, name):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeMismatch(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * out / b.data, b.shape)
        return ga, gb

    return _node(out, (a, b), bw, "div")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


# -- elementwise unary --------------------------------------------------------
def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# -- reductions ---------------------------------------------------------------
def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _node(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),),
                 "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1) if a.size else 1

    def bw(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _node(out, (a,), bw, "mean")


def l2_norm(a, axis=None, keepdims=False):
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def bw(g):
        gk = g if keepdims or axis is None else np.expand_dims(g, axis)
        if axis is None:
            gk = np.reshape(gk, (1,) * a.ndim)
        safe = np.where(n > 0.0, n, 1.0)
        return (np.where(n > 0.0, gk * a.data / safe, 0.0),)

    out = n if keepdims else (np.squeeze(n, axis=axis) if axis is not None else n.reshape(()))
    return _node(out, (a,), bw, "l2_norm")


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)
    return _node(s, (a,), lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),),
                 "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _node(out, (a,), lambda g: (g - s * np.sum(g, axis=axis, keepdims=True),),
                 "log_softmax")


# -- linear algebra -----------------------------------------------------------
def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    """Matrix product over the last two axes.

    Supported: ``(..., n, k) @ (k, m)`` and equal-rank batched products.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or not (b.ndim == 2 or a.shape[:-2] == b.shape[:-2]):
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, _swap(b.data))
        if b.ndim == 2 and a.ndim > 2:
            k, m = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.matmul(_swap(a.data), g)
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def conv1d(x, kernel):
    """Same-padded, stride-1 temporal convolution.

    Parameters
    ----------
    x : Tensor, shape (N, T, d_in)
    kernel : Tensor, shape (w, d_in, d_out), ``w`` odd

    Returns
    -------
    Tensor, shape (N, T, d_out)
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3 or x.shape[2] != kernel.shape[1]:
        raise ShapeMismatch(f"conv1d: incompatible shapes {x.shape} and {kernel.shape}")
    w, d_in, d_out = kernel.shape
    if w % 2 != 1:
        raise ShapeMismatch(f"conv1d: kernel width must be odd, got {w}")
    N, T, _ = x.shape
    p = w // 2
    xpad = np.pad(x.data, ((0, 0), (p, p), (0, 0)))
    # (N, T, d_in, w) -> (N, T, w, d_in)
    cols = np.lib.stride_tricks.sliding_window_view(xpad, w, axis=1).transpose(0, 1, 3, 2)
    cols2d = cols.reshape(N * T, w * d_in)
    k2d = kernel.data.reshape(w * d_in, d_out)
    out = (cols2d @ k2d).reshape(N, T, d_out)

    def bw(g):
        g2d = g.reshape(N * T, d_out)
        gk = (cols2d.T @ g2d).reshape(w, d_in, d_out)
        gcols = (g2d @ k2d.T).reshape(N, T, w, d_in)
        gpad = np.zeros_like(xpad)
        for k in range(w):
            gpad[:, k:k + T, :] += gcols[:, :, k, :]
        return gpad[:, p:p + T, :], gk

    return _node(out, (x, kernel), bw, "conv1d")


# -- structural ---------------------------------------------------------------
def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),),
                 "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = np.reshape(a.data, shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (np.reshape(g, a.shape),), "reshape")


def broadcast_to(a, shape):
    """Explicit numpy-style broadcast; the only way to tile a tensor."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    kept = tuple(i + lead for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        g = np.sum(g, axis=tuple(range(lead)) + kept, keepdims=True)
        return (g.reshape(a.shape),)

    return _node(out, (a,), bw, "broadcast_to")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeMismatch(f"concat: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def slice_(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), bw, "slice")


# -- checking -----------------------------------------------------------------
def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def grad_check(f, inputs, h=1e-5):
    """Compare autodiff and central-difference gradients of ``f``.

    ``f`` maps a list of Tensors to a scalar Tensor. Returns the worst, over
    inputs, of ``max|g_ad - g_fd| / max(max|g_fd|, 1e-8)``: the error is
    measured against the gradient's own scale, so entries that are tiny
    compared with the rest do not drown in finite-difference noise.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(f(leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def fi(v, i=i):
            args = [Tensor(v if j == i else arrays[j]) for j in range(len(arrays))]
            with no_grad():
                return f(args).item()
        fd = numeric_grad(fi, arrays[i], h)
        ad = leaf.grad if leaf.grad is not None else np.zeros_like(fd)
        if fd.size:
            err = np.max(np.abs(ad - fd)) / max(float(np.max(np.abs(fd))), 1e-8)
            worst = max(worst, float(err))
    return worst
