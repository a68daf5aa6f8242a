"""Small reverse-mode differentiation engine, Adam, and a seeded random stream.

Values are float64 numpy arrays. Every operation returns a new :class:`Tensor`
that remembers its parents and a closure mapping the output cotangent to the
parent cotangents. :func:`backward` orders the graph reachable from a scalar
output into a :class:`Tape` and replays it in reverse.

Binary elementwise operations follow numpy broadcasting; the gradient of a
broadcast operand is summed back to its own shape.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_ids = itertools.count()


class Tensor:
    """A float64 array node in a differentiable expression."""

    __slots__ = ("value", "parents", "grad_fn", "op", "id", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None, *, parents=(), grad_fn=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.grad_fn = grad_fn
        self.op = op
        self.id = next(_ids)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def item(self):
        return float(self.value)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x)


def parameter(x, name=None):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _node(value, parents, grad_fn, op):
    out = Tensor(value, parents=tuple(parents), grad_fn=grad_fn, op=op)
    if not np.all(np.isfinite(out.value)):
        raise NumericError(f"non-finite value produced by node {out.id} ({op})", node_id=out.id)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "subtract")
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "subtract")


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "multiply")
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
                 "multiply")


def divide(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "divide")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value

    def grad_fn(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))

    return _node(out, (a, b), grad_fn, "divide")


def mask_multiply(x, mask):
    """Elementwise product with a non-differentiable 0/1 mask."""
    m = mask.value if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    return multiply(x, Tensor(m))


def negate(a):
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,), "negate")


def matmul(a, b):
    """Matrix product of 2-d operands, or batched product of 3-d operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.value.ndim > 2 and b.value.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes differ {a.shape} and {b.shape}")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.value @ b.value, (a, b), grad_fn, "matmul")


def sin(a):
    a = as_tensor(a)
    return _node(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),), "sin")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _node(out, (a,), lambda g: (g / a.value,), "log")


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)
    with np.errstate(divide="ignore"):
        return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a):
    a = as_tensor(a)
    v = a.value
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    scale = np.where(a.value > 0, 1.0, slope)
    return _node(a.value * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def clip(a, low, high):
    """Clamp to ``[low, high]``; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    inside = (a.value >= low) & (a.value <= high)
    return _node(np.clip(a.value, low, high), (a,), lambda g: (g * inside,), "clip")


def sum_(a, axis=None):
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), grad_fn, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return multiply(sum_(a, axis), 1.0 / n)


def l1_norm(a):
    a = as_tensor(a)
    return _node(np.abs(a.value).sum(), (a,), lambda g: (g * np.sign(a.value),), "l1_norm")


def concatenate(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concatenate: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concatenate")


def slice_(a, index):
    a = as_tensor(a)

    def grad_fn(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.value[index], (a,), grad_fn, "slice")


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def straight_through(hard, relaxed):
    """Forward value ``hard``, backward routed unchanged into ``relaxed``."""
    relaxed = as_tensor(relaxed)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != relaxed.shape:
        raise DimensionError(f"straight_through: {hard.shape} vs {relaxed.shape}")
    return _node(hard, (relaxed,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------- backward


@dataclass
class Tape:
    """Topologically ordered nodes reachable from an output."""

    nodes: list

    @classmethod
    def record(cls, output):
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node.parents:
                if p.id not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]


def forward(fn, **inputs):
    """Evaluate ``fn`` on named inputs, returning ``(output, tape)``.

    Inputs that are not already tensors become differentiable leaves named
    after their keyword.
    """
    leaves = {k: v if isinstance(v, Tensor) else parameter(v, name=k) for k, v in inputs.items()}
    out = fn(**leaves)
    return out, Tape.record(out)


def backward(output, wrt=None):
    """Gradients of a scalar ``output`` with respect to leaf tensors.

    Returns a dict keyed by leaf tensor. ``wrt`` may name tensors that the
    output does not depend on; they receive zero gradients.
    """
    if output.value.size != 1:
        raise ContractError(f"backward needs a scalar seed, got shape {output.shape}")
    tape = Tape.record(output)
    grads = {output.id: np.ones_like(output.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None) if not node.is_leaf else grads.get(node.id)
        if g is None or node.is_leaf:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    result = {n: grads.get(n.id, np.zeros(n.shape)) for n in tape.leaves() if n.requires_grad}
    for t in wrt or ():
        if t not in result:
            result[t] = np.zeros(t.shape)
    return result


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam descent step on a dict of arrays.

    The step is rejected as a whole (nothing mutated) if any gradient is
    non-finite.
    """
    for k, g in grads.items():
        if k not in params:
            raise ContractError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise DimensionError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[k])} for {k!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params = dict(params)
    for k, g in grads.items():
        m = state.m.get(k, 0.0) * b1 + (1 - b1) * g
        v = state.v.get(k, 0.0) * b2 + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[k] = params[k] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step = t
    return new_params, state


# ---------------------------------------------------------------- randomness


class Rng:
    """Explicit seeded random stream (PCG64).

    Normals come from numpy's ziggurat transform of the uniform bit stream;
    uniforms on the open interval (0, 1) are offset by half an ulp of 2**-53
    so that Gumbel draws ``-log(-log(U))`` are always finite.
    """

    def __init__(self, seed=0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed) % 2**64)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def normal(self, shape=()):
        return self._gen.standard_normal(shape)

    def open_uniform(self, shape=()):
        return self._gen.random(shape) + 2.0 ** -54

    def uniform(self, low=0.0, high=1.0, shape=()):
        return low + (high - low) * self._gen.random(shape)

    def gumbel(self, shape=()):
        return -np.log(-np.log(self.open_uniform(shape)))

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, n=1):
        return [Rng(s) for s in self._seq.spawn(n)]


def seeded_rng(seed):
    return Rng(seed)
