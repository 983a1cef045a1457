"""Shared test utilities: gradient checks through modules with parameters."""

import contextlib

import numpy as np

from ultraseg import blocks as B
from ultraseg.autodiff import Variable, grad_check, mul, no_grad, sum_all
from ultraseg.tensor import Rng

# central-difference step; below ~1e-4 truncation error vanishes in the
# 64-bit reference and above ~1e-6 round-off in it stays negligible
EPS = 1e-5


@contextlib.contextmanager
def rebound(module, replacements):
    """Temporarily replace a module's parameter Variables by other Variables.

    ``replacements`` maps full parameter names to Variables; every attribute
    that holds the original parameter object is swapped and restored.
    """
    originals = dict(module.named_parameters())
    by_id = {id(v): name for name, v in originals.items()}
    saved = []
    for _, mod in module.named_modules():
        for attr, value in list(vars(mod).items()):
            name = by_id.get(id(value))
            if name is not None and name in replacements:
                saved.append((mod, attr, value))
                setattr(mod, attr, replacements[name])
    try:
        yield
    finally:
        for mod, attr, value in saved:
            setattr(mod, attr, value)


def projection_objective(fn, out_shape, seed):
    """Scalar sum(w * fn(...)) with fixed random weights w.

    A plain sum would make gradients through train-mode BN identically
    zero, so a random projection is used to keep every path exercised.
    """
    w = Rng(seed).fork(0x5EED).tensor(out_shape, -1.0, 1.0, np.float64)

    def objective(*args):
        y = fn(*args)
        return sum_all(mul(y, Variable(w.astype(y.dtype))))

    return objective


def module_grad_error(module, inputs, seed, dtype, eps=EPS, jitter=0.3):
    """grad_check through ``module(*inputs)`` w.r.t. inputs and all parameters.

    Parameters are perturbed by uniform noise of size ``jitter`` so that
    constant initialisations (BN gamma = 1, zero biases) do not produce
    special-case gradients. Returns the maximum relative error.
    """
    rng = Rng(seed).fork(0xA11)
    names, params = [], []
    for name, var in module.named_parameters():
        names.append(name)
        params.append((var.value.astype(np.float64) + rng.tensor(var.shape, -jitter, jitter, np.float64)).astype(dtype))
    inputs = [np.asarray(x, dtype=dtype) for x in inputs]
    with no_grad():
        with rebound(module, {n: Variable(p) for n, p in zip(names, params)}):
            out_shape = module(*[Variable(x) for x in inputs]).shape
    objective = projection_objective(module, out_shape, seed)
    k = len(inputs)

    def f(leaves):
        with rebound(module, dict(zip(names, leaves[k:]))):
            return objective(*leaves[:k])

    return grad_check(f, inputs + params, eps=eps)


def function_grad_error(fn, inputs, seed, eps=EPS):
    """grad_check of sum(w * fn(*leaves)) for a plain differentiable function."""
    inputs = [np.ascontiguousarray(x) for x in inputs]
    with no_grad():
        out_shape = fn(*[Variable(x) for x in inputs]).shape
    objective = projection_objective(fn, out_shape, seed)
    return grad_check(lambda leaves: objective(*leaves), inputs, eps=eps)


def impulse_edb(channels=48):
    """Linearized EDB with all-ones taps so every reachable offset is nonzero."""
    edb = B.EnhancedDilatedBlock(channels, residual=False)
    edb.initialize(0)
    edb.linearized = True
    for conv in edb.branches:
        conv.weight.value[...] = 1
    edb.fuse.weight.value[...] = 1
    return edb
