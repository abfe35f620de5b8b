"""Tiny layer utilities shared by the deformable operators and the model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class providing parameter discovery by attribute walking."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            if isinstance(value, Tensor) and value.requires_grad:
                value.name = name
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def load_state(self, state, prefix=""):
        """Copy values from a name->array mapping into matching parameters."""
        for name, p in self.named_parameters(prefix=prefix):
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter '{name}'")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter '{name}' shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


def param(rng, shape, std=0.02):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape):
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    """Affine map over the trailing axis."""

    def __init__(self, rng, in_features, out_features, std=0.02):
        self.w = param(rng, (in_features, out_features), std=std)
        self.b = zeros_param((out_features,))

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b


class LayerNorm(Module):
    def __init__(self, channels, axis=1, eps=1e-6):
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))
        self.axis = axis
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, axis=self.axis, eps=self.eps)


def linear_nchw(x, linear: Linear):
    """Apply a Linear across channels of an NCHW tensor (1x1 projection)."""
    n, c, h, w = x.shape
    t = ad.transpose(x, (0, 2, 3, 1)).reshape((n * h * w, c))
    out = linear(t)
    co = out.shape[-1]
    return ad.transpose(out.reshape((n, h, w, co)), (0, 3, 1, 2))
