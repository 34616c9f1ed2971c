"""Minimal module system: parameter discovery, naming and common layers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import functional as F
from .errors import DataError
from .tensor import Parameter, Tensor, get_default_dtype


class Module:
    """Base class; parameters and submodules are discovered from attributes.

    Attributes holding a ``Parameter``, a ``Module`` or a list of modules
    are walked in assignment order, which fixes parameter names such as
    ``art.0.res.conv1.weight``.  A Parameter reachable through several
    paths (weight tying) is reported once, under its first path.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "", _seen=None) -> Iterator[Tuple[str, Parameter]]:
        seen = set() if _seen is None else _seen
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield name, value
            else:
                yield from value.named_parameters(name + ".", seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (keeps aliasing of tied weights)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((prefix + n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, tensors: Dict[str, np.ndarray], prefix: str = "",
                        strict: bool = True) -> None:
        own = dict(self.named_parameters())
        wanted = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        if strict:
            missing = sorted(set(own) - set(wanted))
            unexpected = sorted(set(wanted) - set(own))
            if missing or unexpected:
                raise DataError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in wanted.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(value.shape) != p.shape:
                raise DataError(f"{prefix}{name}: shape {tuple(value.shape)} != {p.shape}")
            p.data = np.array(value, dtype=p.dtype)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(get_default_dtype())


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(get_default_dtype())


def _zeros(*shape) -> np.ndarray:
    return np.zeros(shape, dtype=get_default_dtype())


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True, std: float = 0.02):
        self.weight = Parameter(_normal(rng, (cout, cin, kernel, kernel), std))
        self.bias = Parameter(_zeros(cout)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, output_padding: int = 0,
                 bias: bool = True, std: float = 0.02):
        self.weight = Parameter(_normal(rng, (cin, cout, kernel, kernel), std))
        self.bias = Parameter(_zeros(cout)) if bias else None
        self.stride, self.padding, self.output_padding = stride, padding, output_padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride,
                                  self.padding, self.output_padding)


class Linear(Module):
    """``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_xavier(rng, din, dout))
        self.bias = Parameter(_zeros(dout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = F.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


class InstanceNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(channels, dtype=get_default_dtype()))
        self.shift = Parameter(_zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.normalize(x, "instance", self.gain, self.shift, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = Parameter(np.ones(dim, dtype=get_default_dtype()))
        self.shift = Parameter(_zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.normalize(x, "layer", self.gain, self.shift, self.eps)


class ConvBlock(Module):
    """conv -> instance norm -> relu."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: Optional[int] = None, transposed: bool = False):
        if padding is None:
            padding = kernel // 2
        if transposed:
            self.conv = ConvTranspose2d(cin, cout, kernel, rng, stride, padding,
                                        output_padding=stride - 1)
        else:
            self.conv = Conv2d(cin, cout, kernel, rng, stride, padding)
        self.norm = InstanceNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.norm(self.conv(x)))
