"""Parameter containers: a tiny Module base, the Conv-BN-ReLU unit and Xavier init."""

from __future__ import annotations

import math
from typing import Iterator, Optional, Union

import numpy as np

from .tensor import BatchNormParams, Tensor, batchnorm2d, conv2d, relu

PRNG_NAME = "numpy.PCG64"

SeedLike = Union[int, np.random.Generator, None]


def make_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def xavier_bound(shape: tuple) -> float:
    """Half-width ``sqrt(6 / (fan_in + fan_out))`` of the Xavier uniform range."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape, seed: SeedLike = None, dtype=np.float32) -> Tensor:
    """Uniform Xavier/Glorot weights on [-a, a]; deterministic for a fixed seed."""
    shape = tuple(int(s) for s in shape)
    a = xavier_bound(shape)
    rng = make_rng(seed)
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


class Module:
    """Attribute-discovered tree of parameters, like a stripped-down torch Module."""

    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._own_parameters():
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._own_buffers():
            yield prefix + name, b
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics, in a stable traversal order."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .errors import CheckpointShapeError

        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise CheckpointShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise CheckpointShapeError(f"{name}: shape {src.shape} != expected {arr.shape}")
        params = dict(self.named_parameters())
        for name, arr in own.items():
            src = np.asarray(state[name])
            if name in params:
                params[name].data = src.astype(arr.dtype, copy=True)
            else:
                arr[...] = src

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_values(self) -> int:
        return sum(int(a.size) for a in self.state_dict().values())


class ConvUnit(Module):
    """3x3 (or kxk) convolution with optional BatchNorm and ReLU.

    Padding equals ``dilation * (k // 2)`` so spatial size is preserved.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, dilation: int = 1,
                 bn: bool = True, activation: bool = True,
                 rng: SeedLike = None, dtype=np.float32):
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.dilation = kernel, dilation
        self.padding = dilation * (kernel // 2)
        self.activation = activation
        self.weight = xavier_init((c_out, c_in, kernel, kernel), make_rng(rng), dtype)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.bn: Optional[BatchNormParams] = BatchNormParams.create(c_out, dtype) if bn else None

    def _own_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias
        if self.bn is not None:
            yield "bn.gamma", self.bn.gamma
            yield "bn.beta", self.bn.beta

    def _own_buffers(self):
        if self.bn is not None:
            yield "bn.running_mean", self.bn.running_mean
            yield "bn.running_var", self.bn.running_var

    def train(self, mode: bool = True) -> "ConvUnit":
        self.training = mode
        if self.bn is not None:
            self.bn.training = mode
        return self

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.weight, self.bias, stride=1, padding=self.padding, dilation=self.dilation)
        if self.bn is not None:
            y = batchnorm2d(y, self.bn)
        return relu(y) if self.activation else y
