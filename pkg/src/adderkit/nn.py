"""Stateful wrappers around the functional kernels, for training.

Each module caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into :class:`Param.grad`.
"""

from __future__ import annotations

import numpy as np

from .gradients import GradMode, bn_backward, filter_backward, relu_backward, upsample_backward
from .layers import BatchNormState, FilterBank, FilterKind, batchnorm_forward, filter_forward
from .tensor import DTYPE


class Param:
    """A parameter array plus its gradient buffer (same shape, zeroed by :meth:`zero_grad`)."""

    def __init__(self, value: np.ndarray, adder: bool = False):
        self.value = value
        self.grad = np.zeros_like(value)
        self.adder = adder

    def zero_grad(self):
        self.grad[...] = 0


class Module:
    def forward(self, x, training=True):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def named_params(self, prefix=""):
        return []

    def parameters(self):
        return [p for _, p in self.named_params()]

    def batchnorms(self, prefix=""):
        return []

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    __call__ = forward


class Filter(Module):
    def __init__(self, bank: FilterBank, grad_mode: GradMode | None = None):
        self.bank = bank
        self.grad_mode = grad_mode or GradMode()
        self.weight = Param(bank.weights, adder=bank.kind is FilterKind.ADDER)
        self.bias = Param(bank.bias) if bank.bias is not None else None
        self._x = None

    @classmethod
    def create(cls, kind, c_in, c_out, kernel=3, stride=1, padding=None, bias=False, rng=None, grad_mode=None):
        return cls(FilterBank.init(kind, c_in, c_out, kernel, stride, padding, bias, rng), grad_mode)

    def shared(self) -> "Filter":
        """A second call site with the same weights and gradient buffers but its own cache."""
        twin = Filter.__new__(Filter)
        twin.bank, twin.grad_mode = self.bank, self.grad_mode
        twin.weight, twin.bias = self.weight, self.bias
        twin._x = None
        return twin

    def forward(self, x, training=True):
        self._x = x
        return filter_forward(x, self.bank)

    def backward(self, gy):
        gx, gw, gb = filter_backward(self._x, self.bank, gy, self.grad_mode)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx

    def named_params(self, prefix=""):
        out = [(prefix + "weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out


class BatchNorm(Module):
    def __init__(self, channels: int, momentum=0.1, eps=1e-5):
        self.state = BatchNormState.create(channels, momentum, eps)
        self.gamma = Param(self.state.gamma)
        self.beta = Param(self.state.beta)
        self._x = None
        self._training = True

    def forward(self, x, training=True):
        self._x, self._training = x, training
        return batchnorm_forward(x, self.state, training)

    def backward(self, gy):
        gx, gg, gb = bn_backward(self._x, self.state, gy, self._training)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx.astype(DTYPE)

    def named_params(self, prefix=""):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]

    def batchnorms(self, prefix=""):
        return [(prefix.rstrip("."), self.state)]


class ReLU(Module):
    def forward(self, x, training=True):
        self._x = x
        return np.maximum(x, 0)

    def backward(self, gy):
        return relu_backward(self._x, gy)


class Upsample2x(Module):
    def forward(self, x, training=True):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, gy):
        return upsample_backward(gy)


class GlobalAvgPool(Module):
    def forward(self, x, training=True):
        self._shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, gy):
        n, c, h, w = self._shape
        return np.broadcast_to(gy / (h * w), self._shape).astype(DTYPE)


class Sequential(Module):
    def __init__(self, *layers, names=None):
        self.layers = list(layers)
        self.names = names or [str(i) for i in range(len(layers))]

    def forward(self, x, training=True):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    def named_params(self, prefix=""):
        out = []
        for name, layer in zip(self.names, self.layers):
            out.extend(layer.named_params(f"{prefix}{name}."))
        return out

    def batchnorms(self, prefix=""):
        out = []
        for name, layer in zip(self.names, self.layers):
            out.extend(layer.batchnorms(f"{prefix}{name}."))
        return out


def filter_bn_relu(kind, c_in, c_out, kernel=3, stride=1, rng=None, grad_mode=None, act=True):
    """The ubiquitous filter -> BN -> ReLU block (no filter bias, BN follows)."""
    layers = [Filter.create(kind, c_in, c_out, kernel, stride, rng=rng, grad_mode=grad_mode), BatchNorm(c_out)]
    names = ["filter", "bn"]
    if act:
        layers.append(ReLU())
        names.append("relu")
    return Sequential(*layers, names=names)
