"""Static FLOP accounting.

One multiply-accumulate counts as one FLOP. Under the default convention only
convolutions, fully-connected layers and the squeeze-excitation gate are
charged; batch norm, activations, pooling and residual adds are free unless
``elementwise=True``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .blocks import SEBottleneck
from .model import MultiExitModel
from .nn import (BasicBlock, BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Linear, MaxPool2d,
                 Module, ReLU, SEGate, Sequential)

Shape = Tuple[int, ...]


def flops_of_layer(layer: Module, in_shape: Shape, elementwise: bool = False) -> Tuple[int, Shape]:
    """MAC count of ``layer`` on one sample of shape ``in_shape``, and its output shape."""
    if in_shape is None or any(d is None for d in in_shape):
        raise ValueError(f"cannot cost {layer!r} on unspecified shape {in_shape}")
    in_shape = tuple(int(d) for d in in_shape)
    n_in = int(np.prod(in_shape))

    if isinstance(layer, Conv2d):
        out = layer.out_shape(in_shape)
        return layer.kernel ** 2 * layer.in_channels * layer.out_channels * out[1] * out[2], out
    if isinstance(layer, Linear):
        out = layer.out_shape(in_shape)
        return layer.in_features * layer.out_features, out
    if isinstance(layer, SEGate):
        c = layer.channels
        macs = 2 * c * c // layer.ratio + n_in
        if elementwise:
            macs += n_in + c // layer.ratio + 2 * c  # GAP, ReLU, sigmoid
        return macs, in_shape
    if isinstance(layer, (BatchNorm2d, ReLU, MaxPool2d, GlobalAvgPool, Flatten)):
        out = layer.out_shape(in_shape)
        if not elementwise:
            return 0, out
        if isinstance(layer, BatchNorm2d):
            return 2 * n_in, out
        if isinstance(layer, MaxPool2d):
            return layer.kernel ** 2 * int(np.prod(out)), out
        if isinstance(layer, Flatten):
            return 0, out
        return n_in, out
    if isinstance(layer, Sequential):
        total, shape = 0, in_shape
        for child in layer:
            macs, shape = flops_of_layer(child, shape, elementwise)
            total += macs
        return total, shape
    if isinstance(layer, (BasicBlock, SEBottleneck)):
        total, shape = 0, in_shape
        trunk = [c for n, c in layer.children() if n not in ("shortcut",)]
        for child in trunk:
            macs, shape = flops_of_layer(child, shape, elementwise)
            total += macs
        if layer.shortcut is not None:
            total += flops_of_layer(layer.shortcut, in_shape, elementwise)[0]
        if elementwise:
            total += 2 * int(np.prod(shape))  # residual add + final ReLU
        return total, shape
    raise TypeError(f"no cost rule for {type(layer).__name__}")


def module_flops(layer: Module, in_shape: Shape, elementwise: bool = False) -> int:
    return flops_of_layer(layer, in_shape, elementwise)[0]


@dataclass
class FlopsReport:
    """Per-exit costs of a multi-exit model.

    ``classifier_flops[m]`` is exit m's full path (stages up to its attach point
    plus its branch); ``branch_only_flops[m]`` the branch alone (the final head
    for m = M); ``branch_total`` sums the intermediate branches.
    """

    classifier_flops: List[int]
    branch_only_flops: List[int]
    backbone_through_stage: List[int]
    backbone_total: int
    branch_total: int

    @property
    def M(self) -> int:
        return len(self.classifier_flops)

    @property
    def total(self) -> int:
        """Backbone plus every branch."""
        return self.backbone_total + self.branch_total

    def path_costs(self) -> List[int]:
        """Cost paid by a sample exiting at m: classifier m plus all earlier branches."""
        out, carried = [], 0
        for m in range(self.M):
            out.append(self.classifier_flops[m] + carried)
            carried += self.branch_only_flops[m]
        return out


def flops_report(model: MultiExitModel, elementwise: bool = False) -> FlopsReport:
    bb = model.backbone
    stage_costs = []
    shape: Shape = bb.input_shape
    for stage in bb.stages:
        macs, shape = flops_of_layer(stage, shape, elementwise)
        stage_costs.append(macs)
    cumulative = np.cumsum(stage_costs).tolist()
    head = module_flops(bb.head, shape, elementwise)

    classifier, branch_only, through = [], [], []
    for m in range(1, model.M):
        k = model.exit_stage(m)
        b = module_flops(model.branches[m - 1], bb.stage_shapes[k - 1], elementwise)
        branch_only.append(b)
        through.append(int(cumulative[k - 1]))
        classifier.append(int(cumulative[k - 1]) + b)
    backbone_total = int(cumulative[-1]) + head
    branch_only.append(head)
    through.append(int(cumulative[-1]))
    classifier.append(backbone_total)
    return FlopsReport(classifier, branch_only, through, backbone_total, sum(branch_only[:-1]))


def adaptive_flops(report: FlopsReport, exit_rates: Sequence[float]) -> float:
    """Average cost when a fraction ``exit_rates[m]`` of samples leaves at exit m."""
    r = np.asarray(exit_rates, dtype=np.float64)
    if r.shape != (report.M,):
        raise ValueError(f"need {report.M} exit rates, got {r.shape}")
    if np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
        raise ValueError(f"exit rates must be a probability distribution, got {r.tolist()}")
    return float(np.dot(r, np.asarray(report.path_costs(), dtype=np.float64)))
