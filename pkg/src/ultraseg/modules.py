"""Parameter containers and the basic layers models are built from.

Parameters are created uninitialised and filled in by :meth:`Module.initialize`,
which seeds each one from (seed, full parameter name). Two models that share
a parameter name therefore share its initial value, whatever else differs.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from . import functional as F
from .autodiff import Variable
from .tensor import DTYPE, Rng


class Module:
    def __init__(self):
        self._params = {}
        self._inits = {}
        self._children = {}
        self._buffers = {}
        self.training = True

    def param(self, name, shape, init="kaiming", fan_in=None, value=0.0):
        """Register a parameter; ``init`` is "kaiming", "zeros", "ones" or "const"."""
        var = Variable(np.zeros(shape, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = var
        self._inits[name] = (init, fan_in, value)
        return var

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, mod in self._children.items():
            yield from mod.named_modules(f"{prefix}{name}.")

    def named_parameters(self, prefix=""):
        for name, var in self._params.items():
            yield prefix + name, var
        for name, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for name, mod in self._children.items():
            yield from mod.named_buffers(f"{prefix}{name}.")

    def initialize(self, seed, prefix=""):
        for name, var in self._params.items():
            kind, fan_in, value = self._inits[name]
            full = prefix + name
            if kind == "kaiming":
                rng = Rng(seed).fork(zlib.crc32(full.encode()))
                bound = math.sqrt(6.0 / fan_in)
                var.value[...] = rng.tensor(var.shape, -bound, bound)
            elif kind == "zeros":
                var.value[...] = 0
            elif kind == "ones":
                var.value[...] = 1
            else:
                var.value[...] = value
            var.zero_grad()
        for name, mod in self._children.items():
            mod.initialize(seed, f"{prefix}{name}.")

    def train(self, mode=True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv(Module):
    """A convolution layer. ``scale`` is its input's stride relative to the image."""

    def __init__(self, spec: F.ConvSpec, bias=True, scale=1):
        super().__init__()
        self.spec = spec
        self.scale = scale
        fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
        self.weight = self.param("weight", spec.weight_shape, "kaiming", fan_in=fan_in)
        self.bias = self.param("bias", (1, spec.out_channels, 1, 1), "zeros") if bias else None

    def forward(self, x):
        return F.conv2d(x, self.spec, self.weight, self.bias)


def pointwise(cin, cout, bias=True, scale=1):
    return Conv(F.ConvSpec(cin, cout, 1), bias=bias, scale=scale)


def conv3x3(cin, cout, bias=True, scale=1, dilation=1, groups=1):
    return Conv(F.ConvSpec(cin, cout, 3, padding=dilation, dilation=dilation, groups=groups),
                bias=bias, scale=scale)


def depthwise3x3(channels, dilation=1, bias=True, scale=1):
    return conv3x3(channels, channels, bias=bias, scale=scale, dilation=dilation, groups=channels)


class BatchNorm(Module):
    def __init__(self, channels):
        super().__init__()
        self.gamma = self.param("gamma", (1, channels, 1, 1), "ones")
        self.beta = self.param("beta", (1, channels, 1, 1), "zeros")
        self.state = F.BNState(channels)
        self._buffers["running_mean"] = self.state.running_mean
        self._buffers["running_var"] = self.state.running_var

    def initialize(self, seed, prefix=""):
        super().initialize(seed, prefix)
        self.state.running_mean[...] = 0
        self.state.running_var[...] = 1

    def forward(self, x):
        return F.batchnorm2d(x, self.gamma, self.beta, self.state, "train" if self.training else "infer")


class ConvBNAct(Module):
    """k x k convolution, batch norm, activation."""

    def __init__(self, cin, cout, scale=1, act="gelu"):
        super().__init__()
        self.conv = self.child("conv", conv3x3(cin, cout, bias=False, scale=scale))
        self.bn = self.child("bn", BatchNorm(cout))
        self.act = act

    def forward(self, x):
        return F.activation(self.bn(self.conv(x)), self.act)


class SepConvBNAct(Module):
    """Depthwise 3x3, pointwise projection, batch norm, activation."""

    def __init__(self, cin, cout, scale=1, act="gelu"):
        super().__init__()
        self.dw = self.child("dw", depthwise3x3(cin, bias=False, scale=scale))
        self.pw = self.child("pw", pointwise(cin, cout, bias=False, scale=scale))
        self.bn = self.child("bn", BatchNorm(cout))
        self.act = act

    def forward(self, x):
        return F.activation(self.bn(self.pw(self.dw(x))), self.act)
