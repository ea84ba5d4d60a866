"""Parameter containers and the small layer set the model is built from."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np
from scipy.stats import truncnorm

from .errors import ArgumentError, DimensionError
from .kernels import conv2d, layer_norm, layer_scale, linear
from .tensor import Tensor, resolve_dtype

INIT_STD = 0.02
LAYER_SCALE_INIT = 1e-6


def trunc_normal(rng, shape, std=INIT_STD):
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng).astype(np.float32)


class Param:
    """A named trainable tensor; ``name`` is the dot-separated module path."""

    __slots__ = ("name", "tensor")

    def __init__(self, name, tensor):
        self.name = name
        self.tensor = tensor

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.tensor.shape})"


class Module:
    """Base class; tensors and child modules assigned as attributes register in order."""

    def __init__(self):
        object.__setattr__(self, "_tensors", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, key, value):
        if isinstance(value, Tensor):
            value.requires_grad = True
            self._tensors[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix=""):
        for key, tensor in self._tensors.items():
            yield Param(prefix + key, tensor)
        for key, child in self._children.items():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self):
        """Unique parameters; a module reused under several names appears once."""
        seen, params = set(), []
        for param in self.named_parameters():
            if id(param.tensor) not in seen:
                seen.add(id(param.tensor))
                params.append(param)
        return params

    def zero_grad(self):
        for param in self.parameters():
            param.tensor.grad = None

    def state_dict(self):
        return OrderedDict((p.name, p.tensor.data) for p in self.parameters())

    def load_state_dict(self, state, strict=True):
        params = {p.name: p for p in self.parameters()}
        missing = [name for name in params if name not in state]
        unexpected = [name for name in state if name not in params]
        if strict and (missing or unexpected):
            raise ArgumentError(
                f"State mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}"
            )
        for name, value in state.items():
            if name not in params:
                continue
            target = params[name].tensor
            value = np.asarray(value)
            if value.shape != target.shape:
                raise DimensionError(
                    f"Parameter {name} expects shape {target.shape}, got {value.shape}"
                )
            target.data = np.ascontiguousarray(value, dtype=target.dtype)

    def to(self, dtype):
        """Cast every parameter in place to ``fp32`` or ``fp64``."""
        dtype = resolve_dtype(dtype)
        for param in self.parameters():
            param.tensor.data = param.tensor.data.astype(dtype)
            param.tensor.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def count_parameters(module):
    return int(sum(p.tensor.size for p in module.parameters()))


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0, groups=1, bias=True):
        super().__init__()
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = Tensor(trunc_normal(rng, (out_ch, in_ch // groups, kernel, kernel)))
        if bias:
            self.bias = Tensor(np.zeros(out_ch, dtype=np.float32))
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Linear(Module):
    def __init__(self, rng, in_features, out_features):
        super().__init__()
        self.weight = Tensor(trunc_normal(rng, (out_features, in_features)))
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32))

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    """Layer norm over one axis; ``axis=1`` gives the channels-first 2D variant."""

    def __init__(self, channels, axis=-1):
        super().__init__()
        self.axis = axis
        self.weight = Tensor(np.ones(channels, dtype=np.float32))
        self.bias = Tensor(np.zeros(channels, dtype=np.float32))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, axis=self.axis)


class LayerScale(Module):
    def __init__(self, channels, axis=-1, init=LAYER_SCALE_INIT):
        super().__init__()
        self.axis = axis
        self.gamma = Tensor(np.full(channels, init, dtype=np.float32))

    def forward(self, x):
        return layer_scale(x, self.gamma, axis=self.axis)
