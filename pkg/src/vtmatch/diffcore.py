"""Dense-matrix forward primitives with reverse-mode gradients.

Everything is a 2-D float64 array wrapped in a :class:`Tensor`. The graph
is rebuilt on every forward pass: each op records its parents and a
vector-Jacobian closure, and :func:`backward` walks the nodes once in
reverse topological order. Scalars are 1x1 matrices throughout.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeMismatchError",
    "Tensor",
    "constant",
    "zeros",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "transpose",
    "concat_rows",
    "concat_cols",
    "row_sums",
    "col_sums",
    "sum_all",
    "softmax_rows",
    "l2_normalize",
    "euclidean_norm",
    "elementwise_max",
    "apply_primitive",
    "backward",
    "gradients",
    "grad_check",
]

# Norms below this are treated as zero by l2_normalize / euclidean_norm.
ZERO_NORM_EPS = 1e-12


class ShapeMismatchError(ValueError):
    """A primitive was applied to inputs whose shapes do not conform."""

    def __init__(self, primitive, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        super().__init__(
            f"{primitive}: incompatible shapes {' vs '.join(str(s) for s in shapes)}"
        )


class Tensor:
    """A node in the computation graph: a 2-D float64 value plus, for
    non-leaf nodes, the parents and the local vector-Jacobian closure."""

    __slots__ = ("value", "name", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None, name=None):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(-1, 1)
        elif v.ndim != 2:
            raise ShapeMismatchError("tensor", v.shape)
        self.value = v
        self.name = name
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        if self.value.shape != (1, 1):
            raise ShapeMismatchError("item", self.value.shape)
        return float(self.value[0, 0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def constant(value, name=None):
    """Leaf tensor; not part of any parameter set."""
    return Tensor(value, name=name)


def zeros(rows, cols=1):
    return Tensor(np.zeros((rows, cols)))


def _same_shape(primitive, a, b):
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(primitive, a.value.shape, b.value.shape)


def matmul(a, b):
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError("matmul", a.value.shape, b.value.shape)
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return Tensor(av @ bv, (a, b), vjp)


def add(a, b):
    _same_shape("add", a, b)

    def vjp(g):
        return g, g

    return Tensor(a.value + b.value, (a, b), vjp)


def sub(a, b):
    _same_shape("sub", a, b)

    def vjp(g):
        return g, -g

    return Tensor(a.value - b.value, (a, b), vjp)


def mul(a, b):
    _same_shape("mul", a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return g * bv, g * av

    return Tensor(av * bv, (a, b), vjp)


def neg(a):
    def vjp(g):
        return (-g,)

    return Tensor(-a.value, (a,), vjp)


def scale(a, c):
    """Multiply by a python float (not a learnable quantity)."""
    c = float(c)

    def vjp(g):
        return (g * c,)

    return Tensor(a.value * c, (a,), vjp)


def add_scalar(a, c):
    c = float(c)

    def vjp(g):
        return (g,)

    return Tensor(a.value + c, (a,), vjp)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.value))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, (a,), vjp)


def tanh(a):
    out = np.tanh(a.value)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, (a,), vjp)


def relu(a):
    mask = a.value > 0.0

    def vjp(g):
        return (g * mask,)

    return Tensor(np.where(mask, a.value, 0.0), (a,), vjp)


def exp(a):
    out = np.exp(a.value)

    def vjp(g):
        return (g * out,)

    return Tensor(out, (a,), vjp)


def transpose(a):
    def vjp(g):
        return (g.T,)

    return Tensor(a.value.T, (a,), vjp)


def concat_rows(tensors):
    """Vertical stack: inputs share the column count."""
    tensors = list(tensors)
    cols = tensors[0].value.shape[1]
    for t in tensors[1:]:
        if t.value.shape[1] != cols:
            raise ShapeMismatchError("concat_rows", tensors[0].value.shape, t.value.shape)
    sizes = [t.value.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return Tensor(np.concatenate([t.value for t in tensors], axis=0), tuple(tensors), vjp)


def concat_cols(tensors):
    """Horizontal stack: inputs share the row count."""
    tensors = list(tensors)
    rows = tensors[0].value.shape[0]
    for t in tensors[1:]:
        if t.value.shape[0] != rows:
            raise ShapeMismatchError("concat_cols", tensors[0].value.shape, t.value.shape)
    sizes = [t.value.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return Tensor(np.concatenate([t.value for t in tensors], axis=1), tuple(tensors), vjp)


def row_sums(a):
    """n x m -> n x 1."""
    shape = a.value.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.value.sum(axis=1, keepdims=True), (a,), vjp)


def col_sums(a):
    """n x m -> 1 x m."""
    shape = a.value.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.value.sum(axis=0, keepdims=True), (a,), vjp)


def sum_all(a):
    """n x m -> 1 x 1."""
    shape = a.value.shape

    def vjp(g):
        return (np.full(shape, g[0, 0]),)

    return Tensor(a.value.sum().reshape(1, 1), (a,), vjp)


def softmax_rows(a):
    """Row-wise softmax with max-subtraction for stability."""
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor(out, (a,), vjp)


def l2_normalize(a):
    """Normalize the whole matrix (typically a column vector) to unit
    Euclidean norm; inputs with norm below ZERO_NORM_EPS map to zero."""
    n = float(np.sqrt((a.value * a.value).sum()))
    if n < ZERO_NORM_EPS:
        shape = a.value.shape

        def vjp_zero(g):
            return (np.zeros(shape),)

        return Tensor(np.zeros(shape), (a,), vjp_zero)
    out = a.value / n

    def vjp(g):
        return ((g - out * (out * g).sum()) / n,)

    return Tensor(out, (a,), vjp)


def euclidean_norm(a):
    """Frobenius/Euclidean norm -> 1 x 1; gradient is zero at the origin."""
    n = float(np.sqrt((a.value * a.value).sum()))
    av = a.value

    def vjp(g):
        if n < ZERO_NORM_EPS:
            return (np.zeros(av.shape),)
        return (g[0, 0] * av / n,)

    return Tensor(np.array([[n]]), (a,), vjp)


def elementwise_max(tensors):
    """Coordinatewise max over a nonempty sequence of same-shape tensors.
    Ties route the gradient to the first input attaining the max."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatchError("elementwise_max", ())
    shape = tensors[0].value.shape
    for t in tensors[1:]:
        if t.value.shape != shape:
            raise ShapeMismatchError("elementwise_max", shape, t.value.shape)
    stacked = np.stack([t.value for t in tensors], axis=0)
    argmax = stacked.argmax(axis=0)
    out = stacked.max(axis=0)

    def vjp(g):
        return tuple(g * (argmax == i) for i in range(len(tensors)))

    return Tensor(out, tuple(tensors), vjp)


_UNARY = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "transpose": transpose,
    "row_sums": row_sums,
    "col_sums": col_sums,
    "sum_all": sum_all,
    "softmax_rows": softmax_rows,
    "l2_normalize": l2_normalize,
    "euclidean_norm": euclidean_norm,
}

_BINARY = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
}

_VARIADIC = {
    "concat_rows": concat_rows,
    "concat_cols": concat_cols,
    "elementwise_max": elementwise_max,
}


def apply_primitive(kind, inputs):
    """Dispatch a primitive by name over a list of tensors."""
    if kind in _UNARY:
        (a,) = inputs
        return _UNARY[kind](a)
    if kind in _BINARY:
        a, b = inputs
        return _BINARY[kind](a, b)
    if kind in _VARIADIC:
        return _VARIADIC[kind](list(inputs))
    raise KeyError(f"unknown primitive {kind!r}")


def _topo_order(root):
    """Iterative post-order over the graph reachable from root."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output):
    """Accumulate d(output)/d(node) for every node reachable from the
    scalar output. Returns a mapping id(tensor) -> gradient array."""
    if output.value.shape != (1, 1):
        raise ShapeMismatchError("backward", output.value.shape)
    grads = {id(output): np.ones((1, 1))}
    for node in reversed(_topo_order(output)):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return grads


def gradients(output, params):
    """Gradient map for a named parameter set; parameters the output does
    not depend on get zero matrices of the matching shape."""
    raw = backward(output)
    out = {}
    for name, t in params.items():
        g = raw.get(id(t))
        out[name] = np.zeros(t.value.shape) if g is None else g
    return out


def grad_check(loss_fn, params, eps=1e-5):
    """Max relative error between analytic gradients and central finite
    differences over every entry of every parameter.

    loss_fn takes the parameter dict and returns a scalar Tensor; it must
    re-read parameter values on each call (they are perturbed in place).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = loss_fn(params)
    if not np.isfinite(loss.item()):
        raise FloatingPointError("non-finite loss in grad_check")
    analytic = gradients(loss, params)
    worst = 0.0
    for name, t in params.items():
        value = t.value
        grad = analytic[name]
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + eps
            lo = loss_fn(params).item()
            value[idx] = orig - eps
            hi = loss_fn(params).item()
            value[idx] = orig
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}")
            numeric = (lo - hi) / (2.0 * eps)
            a = grad[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
