"""Define-by-run reverse-mode differentiation over dense 2D float64 arrays.

Every op returns a new :class:`Tensor`; when any operand requires a gradient
the result remembers its parents and a closure that maps the upstream
gradient to per-parent gradients. :func:`backward` rebuilds the tape from the
root (recording order is a valid topological order) and walks it in reverse.

Broadcasting is deliberately narrow: an elementwise operand may be the same
shape, a (1, cols) row, a (rows, 1) column or a (1, 1) scalar.
"""

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from gemkit import special


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


_seq = itertools.count()
_grad_enabled = [True]


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _grad_enabled[0]
    _grad_enabled[0] = False
    try:
        yield
    finally:
        _grad_enabled[0] = prev


def grad_enabled():
    return _grad_enabled[0]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_seq")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    # operator sugar
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


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, op, parents, backward_fn):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output in op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._seq = next(_seq)
    track = _grad_enabled[0] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a, b, op):
    if a == b:
        return a
    ra, ca = a
    rb, cb = b
    rows = _merge_dim(ra, rb)
    cols = _merge_dim(ca, cb)
    if rows is None or cols is None:
        raise ShapeError(f"op '{op}': shapes {a} and {b} do not broadcast")
    return rows, cols


def _merge_dim(x, y):
    if x == y:
        return x
    if x == 1:
        return y
    if y == 1:
        return x
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------- binary ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"op 'matmul': inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ----------------------------------------------------------------- unary ops

def neg(a):
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, "log", (a,), lambda g: (g / ad,))


def sigmoid(a):
    a = as_tensor(a)
    out = _np_sigmoid(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _make(out, "softplus", (a,), lambda g: (g * _np_sigmoid(ad),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes inside the open interval, zero outside."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad > lo) & (ad < hi)
    return _make(np.clip(ad, lo, hi), "clip", (a,), lambda g: (g * inside,))


def lgamma(a):
    a = as_tensor(a)
    ad = a.data
    return _make(special.lgamma(ad), "lgamma", (a,), lambda g: (g * special.digamma(ad),))


def digamma(a):
    a = as_tensor(a)
    ad = a.data
    return _make(special.digamma(ad), "digamma", (a,), lambda g: (g * special.trigamma(ad),))


# ------------------------------------------------------------ reductions etc

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        out = np.array([[a.data.sum()]])
    elif axis in (0, 1):
        out = a.data.sum(axis=axis, keepdims=True)
    else:
        raise ShapeError(f"op 'sum': axis must be None, 0 or 1, got {axis}")
    return _make(out, "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis=None):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif axis in (0, 1):
        n = a.shape[axis]
    else:
        raise ShapeError(f"op 'mean': axis must be None, 0 or 1, got {axis}")
    return mul(sum(a, axis=axis), 1.0 / n)


def softmax_rows(a):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax_rows", (a,), backward)


def normalize_rows(a):
    """Divide each row by its sum."""
    a = as_tensor(a)
    ad = a.data
    s = ad.sum(axis=1, keepdims=True)
    out = ad / s

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) / s,)

    return _make(out, "normalize_rows", (a,), backward)


def concat_cols(*tensors):
    ts = [as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in ts}
    if len(rows) != 1:
        raise ShapeError(f"op 'concat_cols': row counts differ {[t.shape for t in ts]}")
    widths = [t.shape[1] for t in ts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=1), "concat_cols", tuple(ts), backward)


def slice_cols(a, start, stop):
    a = as_tensor(a)
    shape = a.shape
    if not 0 <= start < stop <= shape[1]:
        raise ShapeError(f"op 'slice_cols': [{start}:{stop}] out of range for {shape}")

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop].copy(), "slice_cols", (a,), backward)


def transpose(a):
    a = as_tensor(a)
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


# ------------------------------------------------------------------ backward

@dataclass
class Tape:
    """Operations reachable from a root, in recording order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)


def backward(root):
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor needing it."""
    if root.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 root, got {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not depend on any tensor requiring grad")
    tape = Tape.from_root(root)
    grads = {id(root): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: dict
    excluded: dict
    tol: float

    @property
    def passed(self):
        return all(err < self.tol for err in self.max_rel_error.values())


def grad_check(fn, inputs, h=1e-5, tol=1e-5, kink_points=(), max_coords=None, rng=None):
    """Compare tape gradients of scalar ``fn(*inputs)`` against central differences.

    ``kink_points`` lists values (e.g. +-tau for clip) where the gradient is
    undefined; coordinates whose value lies within ``h`` of one are excluded
    and reported. Errors are norm-wise relative per input.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = fn(*inputs)
    backward(out)
    errors = {}
    excluded = {}
    for idx, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        skip = [int(c) for c in coords
                if any(abs(flat[c] - k) <= h for k in kink_points)]
        numeric = []
        keep = []
        with no_grad():
            for c in coords:
                if int(c) in skip:
                    continue
                orig = flat[c]
                flat[c] = orig + h
                fp = fn(*inputs).item()
                flat[c] = orig - h
                fm = fn(*inputs).item()
                flat[c] = orig
                numeric.append((fp - fm) / (2 * h))
                keep.append(c)
        a = analytic.reshape(-1)[keep]
        n = np.asarray(numeric)
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        errors[t.name or idx] = float(np.linalg.norm(a - n) / scale) if keep else 0.0
        excluded[t.name or idx] = skip
    return GradCheckReport(errors, excluded, tol)


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
