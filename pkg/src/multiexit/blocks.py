"""Branch classifier building blocks.

A level-L branch is a stage-dependent reduction convolution, one downsampling
SE-bottleneck, L-1 shape-preserving SE-bottlenecks, global average pooling and
a fully-connected layer. Level 0 is the naive GAP + FC head. The reduction
convolution maps every attach point onto the penultimate stage's feature size,
so a branch's cost is set by its level, not by where it is attached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

from .nn import (BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Module, ReLU, SEGate,
                 Sequential)
from .tensor import add, relu


@dataclass(frozen=True)
class SEBSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    se_ratio: int = 16

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"SE-B stride must be 1 or 2, got {self.stride}")
        if self.stride == 2 and self.out_channels != 2 * self.in_channels:
            raise ValueError(
                f"downsampling SE-B must double channels: {self.in_channels} -> {self.out_channels}")
        if self.out_channels % 4:
            raise ValueError(f"SE-B out_channels {self.out_channels} not divisible by 4")
        if self.out_channels % self.se_ratio:
            raise ValueError(
                f"SE-B out_channels {self.out_channels} not divisible by SE ratio {self.se_ratio}")

    @property
    def width(self) -> int:
        return self.out_channels // 4


class SEBottleneck(Module):
    """1x1 reduce, 3x3 (carries the stride), 1x1 expand, SE gate, residual add, ReLU."""

    def __init__(self, spec: SEBSpec):
        super().__init__()
        self.spec = spec
        cin, cout, w, s = spec.in_channels, spec.out_channels, spec.width, spec.stride
        self.conv1 = self.add("conv1", Conv2d(cin, w, 1))
        self.bn1 = self.add("bn1", BatchNorm2d(w))
        self.conv2 = self.add("conv2", Conv2d(w, w, 3, s, 1))
        self.bn2 = self.add("bn2", BatchNorm2d(w))
        self.conv3 = self.add("conv3", Conv2d(w, cout, 1))
        self.bn3 = self.add("bn3", BatchNorm2d(cout))
        self.se = self.add("se", SEGate(cout, spec.se_ratio))
        self.shortcut: Optional[Sequential] = None
        if s != 1 or cin != cout:
            self.shortcut = self.add("shortcut", Sequential(Conv2d(cin, cout, 1, s), BatchNorm2d(cout)))

    def trunk(self, x):
        y = relu(self.bn1(self.conv1(x)))
        y = relu(self.bn2(self.conv2(y)))
        return self.bn3(self.conv3(y))

    def forward(self, x):
        y = self.se(self.trunk(x))
        s = self.shortcut(x) if self.shortcut is not None else x
        return relu(add(y, s))

    def out_shape(self, in_shape):
        return self.conv3.out_shape(self.conv2.out_shape(self.conv1.out_shape(in_shape)))

    def op_count(self):
        return 8 + self.se.op_count() + 2 + (2 if self.shortcut is not None else 0)

    def __repr__(self):
        return f"SEB({self.spec.in_channels}->{self.spec.out_channels}, stride={self.spec.stride})"


def build_se_b(spec: SEBSpec) -> SEBottleneck:
    return SEBottleneck(spec)


def reduction_conv_for_stage(input_channels: int, input_spatial: int, target_channels: int,
                             target_spatial: int) -> Tuple[int, int, int]:
    """Kernel, stride and padding of a branch's first convolution.

    The kernel keeps ``kernel**2 * input_channels`` close to the 3x3 cost of the
    penultimate stage (``9 * target_channels``); the stride is the spatial ratio;
    the padding is the smallest one hitting ``target_spatial`` exactly.

    >>> reduction_conv_for_stage(64, 56, 256, 14)
    (6, 4, 1)
    """
    if input_spatial < target_spatial or input_spatial % target_spatial:
        raise ValueError(
            f"input extent {input_spatial} is not a multiple of target extent {target_spatial}")
    stride = input_spatial // target_spatial
    kernel = max(1, int(round(math.sqrt(9.0 * target_channels / input_channels))))
    # out = (H + 2p - k) // s + 1 == T  <=>  k - s <= 2p <= k - 1
    candidates = [p for p in range(0, kernel) if kernel - stride <= 2 * p <= kernel - 1]
    if not candidates:
        raise ValueError(
            f"no integer padding maps {input_spatial} to {target_spatial} with kernel "
            f"{kernel} and stride {stride}")
    exact = [p for p in candidates if (input_spatial + 2 * p - kernel) % stride == 0]
    return kernel, stride, (exact or candidates)[0]


@dataclass(frozen=True)
class BranchSpec:
    level: int
    stage_index: int
    input_channels: int
    input_spatial: int
    num_classes: int
    target_channels: int
    target_spatial: int
    se_ratio: int = 16
    reduction_bn: bool = True

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(f"branch level must be >= 0, got {self.level}")

    @property
    def reduction(self) -> Tuple[int, int, int]:
        return reduction_conv_for_stage(self.input_channels, self.input_spatial,
                                        self.target_channels, self.target_spatial)


class Branch(Sequential):
    """A branch classifier; ``spec`` records how it was built."""

    def __init__(self, spec: BranchSpec, layers, names):
        super().__init__(*layers, names=names)
        self.spec = spec


def build_branch(spec: BranchSpec) -> Branch:
    """Assemble the classifier for one attach point.

    Level 0 returns exactly ``[GAP, FC]``. Level L >= 1 returns the reduction
    conv (+BN+ReLU unless ``reduction_bn`` is off), one stride-2 SE-B doubling
    the channels, L-1 shape-preserving SE-Bs, GAP and FC.
    """
    if spec.level == 0:
        return Branch(spec, [GlobalAvgPool(), Linear(spec.input_channels, spec.num_classes)],
                      ["gap", "fc"])
    k, s, p = spec.reduction
    c = spec.target_channels
    layers: list[Module] = [Conv2d(spec.input_channels, c, k, s, p)]
    names = ["red"]
    if spec.reduction_bn:
        layers += [BatchNorm2d(c), ReLU()]
        names += ["red_bn", "red_relu"]
    layers.append(SEBottleneck(SEBSpec(c, 2 * c, 2, spec.se_ratio)))
    names.append("seb1")
    for i in range(spec.level - 1):
        layers.append(SEBottleneck(SEBSpec(2 * c, 2 * c, 1, spec.se_ratio)))
        names.append(f"seb{i + 2}")
    layers += [GlobalAvgPool(), Linear(2 * c, spec.num_classes)]
    names += ["gap", "fc"]
    return Branch(spec, layers, names)
