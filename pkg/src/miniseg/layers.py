"""Parameter containers and the primitive layers blocks are made from."""

from __future__ import annotations

from typing import Iterator, List, Tuple

import numpy as np

from .tensor import ops
from .tensor.core import Tensor

ROLES = ("kernel", "bias", "bn_gamma", "bn_beta", "bn_mean", "bn_var", "prelu_alpha")
LEARNABLE_ROLES = frozenset(ROLES) - {"bn_mean", "bn_var"}
# roles excluded from weight decay
NO_DECAY_ROLES = frozenset({"bn_gamma", "bn_beta", "prelu_alpha"})

PRELU_INIT = 0.25


class Parameter(Tensor):
    def __init__(self, data, role: str):
        if role not in ROLES:
            raise ValueError(f"unknown parameter role {role!r}")
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=role in LEARNABLE_ROLES)
        self.role = role


class Module:
    """Tiny module tree: attributes holding Parameters or Modules are registered
    in assignment order, which fixes the enumeration order of weights."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_children(self):
        return self._children.items()

    def parameters(self, learnable_only: bool = True) -> List[Parameter]:
        return [p for _, p in self.named_parameters() if p.requires_grad or not learnable_only]

    def num_learnable(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: List[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class Conv2d(Module):
    def __init__(self, spec: ops.ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
        std = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(rng.standard_normal(spec.weight_shape) * std, "kernel")
        if spec.has_bias:
            self.bias = Parameter(np.zeros(spec.out_channels), "bias")
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)


def pointwise(cin: int, cout: int, rng, groups: int = 1, bias: bool = False) -> Conv2d:
    return Conv2d(ops.ConvSpec(cin, cout, (1, 1), groups=groups, has_bias=bias), rng)


def depthwise(channels: int, rng, kernel: int = 3, stride: int = 1, dilation: int = 1) -> Conv2d:
    pad = dilation * (kernel - 1) // 2
    spec = ops.ConvSpec(channels, channels, (kernel, kernel), stride, pad, dilation, channels)
    return Conv2d(spec, rng)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = Parameter(np.ones(channels), "bn_gamma")
        self.bias = Parameter(np.zeros(channels), "bn_beta")
        self.running_mean = Parameter(np.zeros(channels), "bn_mean")
        self.running_var = Parameter(np.ones(channels), "bn_var")

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x, self.weight, self.bias, self.running_mean.data, self.running_var.data, self.training
        )


class PReLU(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = Parameter(np.full(channels, PRELU_INIT), "prelu_alpha")

    def forward(self, x: Tensor) -> Tensor:
        return ops.prelu(x, self.weight)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(x)


def activation(channels: int, use_relu: bool = False) -> Module:
    return ReLU() if use_relu else PReLU(channels)
