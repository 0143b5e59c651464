"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, concat


class Parameter(Tensor):
    """A leaf tensor that is always tracked and owned by a Module."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at +/- 2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Module:
    """Minimal module tree: attributes that are Parameters or Modules (or lists
    of Modules) are discovered in definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def count_parameters(model: Module) -> int:
    """Exact number of scalar learnable parameters."""
    return int(sum(p.size for p in model.parameters()))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = ops.NORM_EPS):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class InstanceNorm3d(Module):
    def __init__(self, channels: int, eps: float = ops.NORM_EPS):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.instance_norm(x, self.weight, self.bias, self.eps)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, padding: int = 0, bias: bool = True):
        fan_in = cin * k**3
        self.weight = Parameter(_kaiming_uniform(rng, (cout, cin, k, k, k), fan_in))
        self.bias = Parameter(_kaiming_uniform(rng, (cout,), fan_in)) if bias else None
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, stride=1, padding=self.padding)


class ConvTranspose3d(Module):
    """2x2x2, stride-2 transposed convolution."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        fan_in = cout * 8
        self.weight = Parameter(_kaiming_uniform(rng, (cin, cout, 2, 2, 2), fan_in))
        self.bias = Parameter(_kaiming_uniform(rng, (cout,), fan_in))

    def forward(self, x: Tensor) -> Tensor:
        return ops.transposed_conv3d(x, self.weight, self.bias)


class CNNBlock(Module):
    """Two (3x3x3 conv -> instance norm -> leaky ReLU) stages."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = Conv3d(cin, cout, 3, rng, padding=1)
        self.norm1 = InstanceNorm3d(cout)
        self.conv2 = Conv3d(cout, cout, 3, rng, padding=1)
        self.norm2 = InstanceNorm3d(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.leaky_relu(self.norm1(self.conv1(x)))
        return ops.leaky_relu(self.norm2(self.conv2(x)))


def cnn_block(x: Tensor, cout: int, rng: np.random.Generator | None = None) -> Tensor:
    """Apply a freshly initialised CNNBlock (functional convenience)."""
    rng = np.random.default_rng(0) if rng is None else rng
    return CNNBlock(x.shape[1], cout, rng)(x)


class SegHead(Module):
    """1x1x1 convolution to K class logits."""

    def __init__(self, cin: int, num_classes: int, rng: np.random.Generator):
        self.conv = Conv3d(cin, num_classes, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


def seg_head(features: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    return ops.conv3d(features, weight, bias)


def channel_concat(*xs: Tensor) -> Tensor:
    return concat(xs, axis=1)
