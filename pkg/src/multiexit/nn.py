"""Layer objects with named parameters.

Layers are declared from shapes alone and allocate their weights on
:meth:`Module.materialize`. The cost model walks unmaterialized layers, so the
ImageNet-sized backbones can be described without holding their weights.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor, add, channel_mul, relu, sigmoid


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Base container: children are registered in declaration order."""

    def __init__(self) -> None:
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self._params: "OrderedDict[str, Optional[Parameter]]" = OrderedDict()
        self._buffers: "OrderedDict[str, Optional[np.ndarray]]" = OrderedDict()
        self.training = True

    def add(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._children.items())

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            if p is None:
                raise RuntimeError(f"{type(self).__name__} is not materialized")
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            if b is None:
                raise RuntimeError(f"{type(self).__name__} is not materialized")
            yield (f"{prefix}.{name}" if prefix else name), b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def materialize(self, rng: np.random.Generator) -> "Module":
        """Allocate and initialize weights for this module and its children."""
        self._init_own(rng)
        for child in self._children.values():
            child.materialize(rng)
        return self

    @property
    def materialized(self) -> bool:
        return all(p is not None for p in self._params.values()) and all(
            c.materialized for c in self._children.values())

    def _init_own(self, rng: np.random.Generator) -> None:
        pass

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def out_shape(self, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        """Output shape (without the batch axis) for a per-sample input shape."""
        raise NotImplementedError

    def op_count(self) -> int:
        """Number of primitive layer ops this module expands to."""
        return 1


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = False):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.has_bias = bias
        self._params["weight"] = None
        if bias:
            self._params["bias"] = None

    def _init_own(self, rng):
        fan_in = self.in_channels * self.kernel * self.kernel
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, (self.out_channels, self.in_channels, self.kernel, self.kernel))
        self._params["weight"] = Parameter(w.astype(DEFAULT_DTYPE))
        if self.has_bias:
            self._params["bias"] = Parameter(np.zeros(self.out_channels, DEFAULT_DTYPE))

    @property
    def weight(self) -> Parameter:
        return self._params["weight"]

    @property
    def bias(self) -> Optional[Parameter]:
        return self._params.get("bias")

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"Conv2d expects {self.in_channels} channels, got {c}")
        return (self.out_channels,
                F.conv_output_size(h, self.kernel, self.stride, self.padding),
                F.conv_output_size(w, self.kernel, self.stride, self.padding))

    def __repr__(self):
        return (f"Conv2d({self.in_channels}->{self.out_channels}, {self.kernel}x{self.kernel}, "
                f"stride={self.stride}, pad={self.padding})")


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self._params["gamma"] = None
        self._params["beta"] = None
        self._buffers["running_mean"] = None
        self._buffers["running_var"] = None

    def _init_own(self, rng):
        c = self.channels
        self._params["gamma"] = Parameter(np.ones(c, DEFAULT_DTYPE))
        self._params["beta"] = Parameter(np.zeros(c, DEFAULT_DTYPE))
        self._buffers["running_mean"] = np.zeros(c, DEFAULT_DTYPE)
        self._buffers["running_var"] = np.ones(c, DEFAULT_DTYPE)

    def forward(self, x):
        return F.batchnorm2d(x, self._params["gamma"], self._params["beta"],
                             self._buffers["running_mean"], self._buffers["running_var"],
                             self.training, self.momentum, self.eps)

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ValueError(f"BatchNorm2d expects {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def __repr__(self):
        return f"BatchNorm2d({self.channels})"


class ReLU(Module):
    def forward(self, x):
        return relu(x)

    def out_shape(self, in_shape):
        return in_shape

    def __repr__(self):
        return "ReLU()"


class MaxPool2d(Module):
    def __init__(self, kernel: int, stride: int, padding: int = 0):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        return F.maxpool2d(x, self.kernel, self.stride, self.padding)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, F.conv_output_size(h, self.kernel, self.stride, self.padding),
                F.conv_output_size(w, self.kernel, self.stride, self.padding))

    def __repr__(self):
        return f"MaxPool2d({self.kernel}x{self.kernel}, stride={self.stride})"


class GlobalAvgPool(Module):
    def forward(self, x):
        return F.global_avg_pool(x)

    def out_shape(self, in_shape):
        return (in_shape[0],)

    def __repr__(self):
        return "GAP()"


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def op_count(self):
        return 0


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.has_bias = bias
        self._params["weight"] = None
        if bias:
            self._params["bias"] = None

    def _init_own(self, rng):
        bound = 1.0 / np.sqrt(self.in_features)
        w = rng.uniform(-bound, bound, (self.out_features, self.in_features))
        self._params["weight"] = Parameter(w.astype(DEFAULT_DTYPE))
        if self.has_bias:
            self._params["bias"] = Parameter(np.zeros(self.out_features, DEFAULT_DTYPE))

    @property
    def weight(self) -> Parameter:
        return self._params["weight"]

    def forward(self, x):
        return F.linear(x, self._params["weight"], self._params.get("bias"))

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ValueError(f"Linear expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def __repr__(self):
        return f"Linear({self.in_features}->{self.out_features})"


class Sequential(Module):
    def __init__(self, *layers: Module, names: Optional[List[str]] = None):
        super().__init__()
        names = names or [str(i) for i in range(len(layers))]
        for name, layer in zip(names, layers):
            self.add(name, layer)

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)

    def __getitem__(self, i: int) -> Module:
        return list(self._children.values())[i]

    def forward(self, x):
        for layer in self._children.values():
            x = layer(x)
        return x

    def out_shape(self, in_shape):
        for layer in self._children.values():
            in_shape = layer.out_shape(in_shape)
        return in_shape

    def op_count(self):
        return sum(layer.op_count() for layer in self._children.values())


class SEGate(Module):
    """Squeeze-excitation: GAP -> FC -> ReLU -> FC -> sigmoid -> channel scaling."""

    def __init__(self, channels: int, ratio: int = 16):
        super().__init__()
        if channels % ratio:
            raise ValueError(f"SE channels {channels} not divisible by reduction ratio {ratio}")
        self.channels, self.ratio = channels, ratio
        self.fc1 = self.add("fc1", Linear(channels, channels // ratio))
        self.fc2 = self.add("fc2", Linear(channels // ratio, channels))

    def gate(self, x: Tensor) -> Tensor:
        s = F.global_avg_pool(x)
        return sigmoid(self.fc2(relu(self.fc1(s))))

    def forward(self, x):
        return channel_mul(x, self.gate(x))

    def out_shape(self, in_shape):
        return in_shape

    def op_count(self):
        return 6


class BasicBlock(Module):
    """Two 3x3 convolutions with an identity or 1x1-projection shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.conv1 = self.add("conv1", Conv2d(in_channels, out_channels, 3, stride, 1))
        self.bn1 = self.add("bn1", BatchNorm2d(out_channels))
        self.conv2 = self.add("conv2", Conv2d(out_channels, out_channels, 3, 1, 1))
        self.bn2 = self.add("bn2", BatchNorm2d(out_channels))
        self.shortcut: Optional[Sequential] = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = self.add("shortcut", Sequential(
                Conv2d(in_channels, out_channels, 1, stride, 0), BatchNorm2d(out_channels)))

    def forward(self, x):
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        s = self.shortcut(x) if self.shortcut is not None else x
        return relu(add(y, s))

    def out_shape(self, in_shape):
        return self.conv2.out_shape(self.conv1.out_shape(in_shape))

    def op_count(self):
        return 7 + (2 if self.shortcut is not None else 0)


def parameter_dict(module: Module) -> Dict[str, Parameter]:
    return dict(module.named_parameters())
