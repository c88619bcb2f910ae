"""Reverse-mode differentiation over dense float64 arrays.

The graph is dynamic: every operation on a :class:`Tensor` records its
parents and a vector-Jacobian product, and :func:`backward` walks the
resulting DAG in reverse topological order. Layers with hand-derived
gradients (convolution, pooling, recurrence) plug in through
:func:`make_node`.
"""

from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class NumericalError(ArithmeticError):
    """A value that must be finite is not."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_vjp")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, *, _parents=(), _vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = _parents
        self._vjp = _vjp

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor({self.op}{label}, shape={self.shape})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __getitem__ = lambda self, idx: slice_(self, idx)

    def __pow__(self, p):
        # integer powers are exact on negative bases, so only clamp fractional ones
        floor = None if float(p).is_integer() else LOG_FLOOR
        return power(self, p, floor=floor)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and not isinstance(axes[0], int) else (axes or None))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, vjp, op):
    """Create a non-leaf tensor.

    ``vjp(g)`` must return one gradient (or ``None``) per parent, each with
    that parent's shape.
    """
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _vjp=vjp if needs else None, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None

# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return make_node(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return make_node(out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x, floor=LOG_FLOOR):
    """Natural log; the argument is clamped to ``>= floor`` (gradient 0 below it)."""
    x = as_tensor(x)
    if floor is None:
        safe = x.data
        return make_node(np.log(safe), (x,), lambda g: (g / safe,), "log")
    live = x.data >= floor
    safe = np.where(live, x.data, floor)
    return make_node(np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),), "log")


def power(x, p, floor=LOG_FLOOR):
    """``x ** p`` for a constant exponent, base clamped to ``>= floor``."""
    x = as_tensor(x)
    p = float(p)
    if floor is None:
        base, live = x.data, None
    else:
        live = x.data >= floor
        base = np.where(live, x.data, floor)
    out = base ** p

    def vjp(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        d = g * p * base ** (p - 1.0)
        return (d if live is None else np.where(live, d, 0.0),)

    return make_node(out, (x,), vjp, "power")


def clip(x, lo, hi):
    x = as_tensor(x)
    live = (x.data >= lo) & (x.data <= hi)
    return make_node(np.clip(x.data, lo, hi), (x,), lambda g: (np.where(live, g, 0.0),), "clip")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    scale = np.where(x.data >= 0, 1.0, slope)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), vjp, "softmax")

# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b):
    """``a @ b`` for ``a`` of rank >= 1 and ``b`` of rank 1 or 2."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        if b.ndim == 1:
            ga = g[..., None] * b.data
            gb = (a.data * g[..., None]).reshape(-1, b.shape[0]).sum(axis=0)
        else:
            ga = g @ b.data.T
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return make_node(out, (a, b), vjp, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def max_(x, axis=None, keepdims=False):
    """Max-reduce; on ties the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x.data, keep + list(axes))
    lead = moved.shape[:len(keep)]
    flat = moved.reshape(lead + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes)

    def vjp(g):
        g = g.reshape(lead)
        gf = np.zeros(flat.shape)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        gm = gf.reshape(moved.shape)
        return (np.transpose(gm, np.argsort(keep + list(axes))),)

    return make_node(out, (x,), vjp, "max")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def slice_(x, index):
    x = as_tensor(x)
    out = x.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def vjp(g):
        full = np.zeros(x.shape)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_node(np.array(out, copy=True), (x,), vjp, "slice")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tensors, vjp, "concat")


def broadcast_to(x, shape):
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from None
    return make_node(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")

# ---------------------------------------------------------------------------
# graph traversal


def topological_order(output):
    """Nodes reachable from ``output``, every node after all of its inputs."""
    order, seen = [], set()
    stack = [(output, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def forward(fn, *inputs, check_finite=True):
    """Evaluate ``fn`` on ``inputs`` (arrays are wrapped as constants)."""
    args = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    out = fn(*args)
    if check_finite:
        outs = out if isinstance(out, (tuple, list)) else (out,)
        for o in outs:
            if not np.all(np.isfinite(o.data)):
                raise NumericalError(f"{o.op}: non-finite output")
    return out


def backward(output, wrt=None):
    """Store d(output)/d(leaf) in ``leaf.grad`` for every reachable leaf that requires grad.

    Returns the gradients of ``wrt`` (zeros for leaves the output does not
    depend on) when given, else a dict keyed by leaf tensor.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    grads = {id(output): np.ones(output.shape)}
    leaves = {}
    for node in reversed(topological_order(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                leaves[id(node)] = node
                node.grad = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if wrt is None:
        return {leaf: leaf.grad for leaf in leaves.values()}
    return [t.grad if id(t) in leaves else np.zeros(t.shape) for t in wrt]


def grad_check(f, x, step=1e-6):
    """Max relative error between the analytic gradient of ``f`` at ``x`` and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The error of coordinate ``i`` is
    ``|a - d| / max(1e-8, |a| + |d|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("grad_check: non-finite function value")
    (analytic,) = backward(out, [xt])
    numeric = np.empty_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = flat[i]
        fp = f(Tensor(x)).item()
        flat[i] = orig - step
        lo = flat[i]
        fm = f(Tensor(x)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (hi - lo)  # representable step, not the nominal one
    return _max_rel_error(analytic, numeric)


def grad_check_leaves(loss_fn, leaves, step=1e-6, max_coords=None, rng=None):
    """Grad check of a closure ``loss_fn() -> scalar Tensor`` against leaf tensors updated in place.

    With ``max_coords`` only a random subset of coordinates per leaf is probed.
    Returns a dict ``leaf name/index -> max relative error``.
    """
    out = loss_fn()
    analytic = backward(out, leaves)
    rng = np.random.default_rng(0) if rng is None else rng
    errors = {}
    for k, (leaf, a) in enumerate(zip(leaves, analytic)):
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        num = np.empty(coords.size)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            hi = flat[i]
            fp = loss_fn().item()
            flat[i] = orig - step
            lo = flat[i]
            fm = loss_fn().item()
            flat[i] = orig
            num[j] = (fp - fm) / (hi - lo)
        errors[leaf.name or k] = _max_rel_error(a.reshape(-1)[coords], num)
    return errors


def _max_rel_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericalError("grad_check: non-finite gradient")
    if analytic.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max())
