"""Minimal module system: layers and residual/dense building blocks.

Modules discover their parameters and buffers by walking attributes
(including lists/dicts of submodules), so checkpoint names mirror the
attribute paths. Parameters are Tensors with requires_grad=True;
buffers (batch-norm running statistics) are plain numpy arrays mutated
in place.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Tensor


def _iter_modules(value, base: str):
    if isinstance(value, Module):
        yield base, value
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _iter_modules(item, f"{base}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _iter_modules(item, f"{base}.{key}")


class Module:
    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _iter_modules(value, key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._buffers.items():
            yield prefix + key, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


class Conv(Module):
    """2D or 3D convolution layer (zero padding, optional bias)."""

    def __init__(self, dim: int, in_channels: int, out_channels: int, kernel,
                 stride=1, padding=0, bias: bool = True, *,
                 dtype=np.float32, rng: np.random.Generator):
        super().__init__()
        if dim not in (2, 3):
            raise ConfigError(f"Conv dim must be 2 or 3, got {dim}")
        self.dim = dim
        self.kernel = ops._tuple_of(dim, kernel, "Conv kernel")
        self.stride = ops._tuple_of(dim, stride, "Conv stride")
        self.padding = ops._tuple_of(dim, padding, "Conv padding")
        fan_in = in_channels * int(np.prod(self.kernel))
        self.weight = _fan_in_uniform(rng, (out_channels, in_channels, *self.kernel), fan_in, dtype)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        op = ops.conv2d if self.dim == 2 else ops.conv3d
        return op(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, *, dtype=np.float32,
                 eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta,
                              self._buffers["running_mean"], self._buffers["running_var"],
                              training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *,
                 dtype=np.float32, rng: np.random.Generator):
        super().__init__()
        self.weight = _fan_in_uniform(rng, (out_features, in_features), in_features, dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BasicBlock(Module):
    """Two 3^d convolutions with identity (or projected) shortcut."""

    def __init__(self, dim: int, in_channels: int, out_channels: int, stride: int = 1,
                 *, dtype=np.float32, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv(dim, in_channels, out_channels, 3, stride, 1, bias=False,
                          dtype=dtype, rng=rng)
        self.bn1 = BatchNorm(out_channels, dtype=dtype)
        self.conv2 = Conv(dim, out_channels, out_channels, 3, 1, 1, bias=False,
                          dtype=dtype, rng=rng)
        self.bn2 = BatchNorm(out_channels, dtype=dtype)
        if stride != 1 or in_channels != out_channels:
            self.proj = Conv(dim, in_channels, out_channels, 1, stride, 0, bias=False,
                             dtype=dtype, rng=rng)
            self.proj_bn = BatchNorm(out_channels, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        shortcut = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return ops.relu(ops.add(y, shortcut))


class BottleneckBlock(Module):
    """1x1 reduce, 3^d spatial (carries the stride), 1x1 expand."""

    def __init__(self, dim: int, in_channels: int, out_channels: int, stride: int = 1,
                 *, dtype=np.float32, rng: np.random.Generator):
        super().__init__()
        mid = max(1, out_channels // 4)
        self.conv1 = Conv(dim, in_channels, mid, 1, 1, 0, bias=False, dtype=dtype, rng=rng)
        self.bn1 = BatchNorm(mid, dtype=dtype)
        self.conv2 = Conv(dim, mid, mid, 3, stride, 1, bias=False, dtype=dtype, rng=rng)
        self.bn2 = BatchNorm(mid, dtype=dtype)
        self.conv3 = Conv(dim, mid, out_channels, 1, 1, 0, bias=False, dtype=dtype, rng=rng)
        self.bn3 = BatchNorm(out_channels, dtype=dtype)
        if stride != 1 or in_channels != out_channels:
            self.proj = Conv(dim, in_channels, out_channels, 1, stride, 0, bias=False,
                             dtype=dtype, rng=rng)
            self.proj_bn = BatchNorm(out_channels, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(self.bn1(self.conv1(x)))
        y = ops.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        shortcut = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return ops.relu(ops.add(y, shortcut))


class DenseLayer(Module):
    """Pre-activation growth layer; concatenates its output to the input."""

    def __init__(self, dim: int, in_channels: int, growth: int,
                 *, dtype=np.float32, rng: np.random.Generator):
        super().__init__()
        self.bn = BatchNorm(in_channels, dtype=dtype)
        self.conv = Conv(dim, in_channels, growth, 3, 1, 1, bias=False, dtype=dtype, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.concat([x, self.conv(ops.relu(self.bn(x)))], axis=1)
