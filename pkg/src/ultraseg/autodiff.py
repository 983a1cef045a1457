"""Reverse-mode automatic differentiation over 4-D tensors.

Every differentiable op builds its output through :func:`record`, which
attaches the parents and a closure mapping the output gradient to one
gradient per parent. :func:`backward` walks the graph in reverse
topological order. Graph recording is disabled inside :func:`no_grad`
(per thread), which is how inference runs.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError
from .tensor import DTYPE, broadcast_kind, check_tensor

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Variable:
    """A tensor value plus its gradient slot and graph linkage."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, value, requires_grad=False, name=None):
        value = np.asarray(value)
        if value.dtype not in (np.float32, np.float64):
            value = value.astype(DTYPE)
        check_tensor(value, name or "variable")
        self.value = value
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(value) if requires_grad else None
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def numpy(self):
        return self.value

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def constant(value) -> Variable:
    return value if isinstance(value, Variable) else Variable(value)


def record(value, parents, backward_fn, op) -> Variable:
    """Wrap an op result, attaching graph linkage when any parent needs it."""
    out = Variable.__new__(Variable)
    out.value = value
    out.grad = None
    out.name = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Variable):
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.value.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a (1,1,1,1) scalar root, got {root.value.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def _reduce_to(g, kind):
    if kind == "same":
        return g
    if kind == "spatial":
        return g.sum(axis=1, keepdims=True)
    if kind == "channel":
        return g.sum(axis=(2, 3), keepdims=True)
    return g.sum(dtype=g.dtype).reshape(1, 1, 1, 1)


def _binary(a, b, kind):
    a, b = constant(a), constant(b)
    bk = broadcast_kind(a.shape, b.shape)
    av, bv = a.value, b.value
    if kind == "add":
        value = av + bv

        def fn(g):
            return g, _reduce_to(g, bk)
    elif kind == "sub":
        value = av - bv

        def fn(g):
            return g, _reduce_to(-g, bk)
    else:
        value = av * bv

        def fn(g):
            return (g * bv if a.requires_grad else None,
                    _reduce_to(g * av, bk) if b.requires_grad else None)
    return record(value, (a, b), fn, kind)


def add(a, b):
    return _binary(a, b, "add")


def sub(a, b):
    return _binary(a, b, "sub")


def mul(a, b):
    return _binary(a, b, "mul")


def elementwise(a, b, kind):
    if kind not in ("add", "sub", "mul"):
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _binary(a, b, kind)


def scale(x: Variable, s: float) -> Variable:
    s = float(s)
    return record(x.value * x.value.dtype.type(s), (x,), lambda g: (g * s,), "scale")


def one_minus(x: Variable) -> Variable:
    return record(1 - x.value, (x,), lambda g: (-g,), "one_minus")


def sum_all(x: Variable) -> Variable:
    shape = x.shape
    value = x.value.sum(dtype=np.float64).astype(x.dtype).reshape(1, 1, 1, 1)
    return record(value, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Variable) -> Variable:
    n = x.value.size
    return scale(sum_all(x), 1.0 / n)


# ---------------------------------------------------------------- gradient check

def grad_check(f, inputs, eps=1e-3, shadow=True):
    """Maximum relative error between analytic and central-difference gradients.

    ``f`` maps a list of Variables to a scalar Variable. ``inputs`` is a list
    of arrays. The analytic gradient is computed at the inputs' own dtype;
    the numerical reference is evaluated in float64 ("shadow") when
    ``shadow`` is true, otherwise at the inputs' dtype. The per-coordinate
    error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    inputs = [np.ascontiguousarray(x) for x in inputs]
    leaves = [Variable(x.copy(), requires_grad=True) for x in inputs]
    out = f(leaves)
    backward(out)
    analytic = [leaf.grad.astype(np.float64) for leaf in leaves]

    ref = [x.astype(np.float64) if shadow else x.copy() for x in inputs]

    def evaluate(arrays):
        with no_grad():
            return float(f([Variable(a) for a in arrays]).value.reshape(()))

    worst = 0.0
    for k, base in enumerate(ref):
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate(ref)
            flat[i] = orig - eps
            fm = evaluate(ref)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic[k].reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
