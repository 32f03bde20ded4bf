"""Staged backbones with attached branch classifiers.

Exit ``i < M`` reads the output of backbone stage ``i`` through branch ``i``;
exit ``M`` is the backbone's own head. Parameters are named by scope
(``stage{k}.``, ``branch{k}.``, ``head.``), so the backbone parameters an exit
depends on are exactly the ``stage1..stage{i}`` prefixes.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .blocks import Branch, BranchSpec, build_branch
from .nn import (BasicBlock, BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Linear, MaxPool2d,
                 Module, ReLU, Sequential)
from .optim import ParamSet
from .tensor import Tensor, op_scope


@dataclass
class BackboneSpec:
    """An ordered list of stages plus the final classifier.

    ``attach_points`` lists the (1-based) stages whose outputs may feed a
    branch: every resolution change except the first one and the last stage.
    """

    name: str
    input_shape: Tuple[int, int, int]
    stages: List[Module]
    head: Module
    num_classes: int
    attach_points: List[int]
    stage_shapes: List[Tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        shape = self.input_shape
        self.stage_shapes = []
        for stage in self.stages:
            shape = stage.out_shape(shape)
            self.stage_shapes.append(shape)
        spatial = [s[1] for s in self.stage_shapes]
        if any(b > a for a, b in zip(spatial, spatial[1:])):
            raise ValueError(f"{self.name}: spatial extent increases across stages {spatial}")
        if self.head.out_shape(shape) != (self.num_classes,):
            raise ValueError(f"{self.name}: head does not emit {self.num_classes} logits")
        if any(not 1 <= p < len(self.stages) for p in self.attach_points):
            raise ValueError(f"{self.name}: attach points {self.attach_points} out of range")

    @property
    def num_stages(self) -> int:
        return len(self.stages)


def _conv_bn_relu(cin: int, cout: int, k: int = 3, stride: int = 1, pad: int = 1) -> List[Module]:
    return [Conv2d(cin, cout, k, stride, pad), BatchNorm2d(cout), ReLU()]


def _gap_fc(channels: int, num_classes: int) -> Sequential:
    return Sequential(GlobalAvgPool(), Linear(channels, num_classes), names=["gap", "fc"])


def resnet18(num_classes: int = 1000, input_size: int = 224) -> BackboneSpec:
    """ResNet-18 split at the ends of its four residual stages."""
    stem = _conv_bn_relu(3, 64, 7, 2, 3) + [MaxPool2d(3, 2, 1)]
    stages = [Sequential(*stem, BasicBlock(64, 64), BasicBlock(64, 64),
                         names=["conv1", "bn1", "relu", "pool", "0", "1"])]
    for cin, cout in [(64, 128), (128, 256), (256, 512)]:
        stages.append(Sequential(BasicBlock(cin, cout, 2), BasicBlock(cout, cout)))
    return BackboneSpec("resnet18", (3, input_size, input_size), stages,
                        _gap_fc(512, num_classes), num_classes, [1, 2, 3])


def vgg16(num_classes: int = 1000, input_size: int = 224) -> BackboneSpec:
    """VGG-16 (with BN) split after the 2nd, 3rd, 4th and 5th pooling layers."""
    def block(cin: int, cout: int, n: int) -> List[Module]:
        layers: List[Module] = []
        for i in range(n):
            layers += _conv_bn_relu(cin if i == 0 else cout, cout)
        return layers + [MaxPool2d(2, 2)]

    stages = [
        Sequential(*block(3, 64, 2), *block(64, 128, 2)),
        Sequential(*block(128, 256, 3)),
        Sequential(*block(256, 512, 3)),
        Sequential(*block(512, 512, 3)),
    ]
    side = input_size // 32
    head = Sequential(Flatten(), Linear(512 * side * side, 4096), ReLU(), Linear(4096, 4096),
                      ReLU(), Linear(4096, num_classes),
                      names=["flatten", "fc1", "relu1", "fc2", "relu2", "fc3"])
    return BackboneSpec("vgg16", (3, input_size, input_size), stages, head, num_classes, [1, 2, 3])


def toynet(num_classes: int = 10, input_size: int = 32) -> BackboneSpec:
    """Three-stage residual net (16/32/64 channels) for desk-scale training."""
    stages = [
        Sequential(*_conv_bn_relu(3, 16), MaxPool2d(2, 2), BasicBlock(16, 16),
                   names=["conv1", "bn1", "relu", "pool", "0"]),
        Sequential(BasicBlock(16, 32, 2)),
        Sequential(BasicBlock(32, 64, 2)),
    ]
    return BackboneSpec("toynet", (3, input_size, input_size), stages,
                        _gap_fc(64, num_classes), num_classes, [1, 2])


BACKBONES: Dict[str, Callable[..., BackboneSpec]] = {
    "resnet18": resnet18,
    "vgg16": vgg16,
    "toynet": toynet,
}

DEFAULT_INPUT = {"resnet18": 224, "vgg16": 224, "toynet": 32}


def build_backbone(name: str, num_classes: Optional[int] = None,
                   input_size: Optional[int] = None) -> BackboneSpec:
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}")
    kwargs = {}
    if num_classes is not None:
        kwargs["num_classes"] = num_classes
    if input_size is not None:
        kwargs["input_size"] = input_size
    return BACKBONES[name](**kwargs)


@dataclass(frozen=True)
class BranchPattern:
    """Per-branch levels; ``kind`` is derived unless given explicitly."""

    levels: Tuple[int, ...]
    kind: str = ""

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        object.__setattr__(self, "levels", levels)
        if any(v < 0 for v in levels):
            raise ValueError(f"branch levels must be >= 0, got {levels}")
        derived = classify_levels(levels)
        if not self.kind:
            object.__setattr__(self, "kind", derived)
        elif self.kind != "explicit" and self.kind != derived:
            raise ValueError(f"levels {levels} are {derived}, not {self.kind}")

    @classmethod
    def parse(cls, text: str) -> "BranchPattern":
        """Read ``"4+3+2"`` style notation; ``n`` marks a naive branch."""
        text = text.strip()
        if not text:
            return cls(())
        levels = []
        for tok in text.split("+"):
            tok = tok.strip().lower()
            if tok == "n":
                levels.append(0)
            elif tok.isdigit():
                levels.append(int(tok))
            else:
                raise ValueError(f"bad pattern token {tok!r} in {text!r}")
        return cls(tuple(levels))

    @property
    def total_level(self) -> int:
        return sum(self.levels)

    def __str__(self) -> str:
        return "+".join("n" if v == 0 else str(v) for v in self.levels)


def classify_levels(levels: Sequence[int]) -> str:
    if len(set(levels)) <= 1:
        return "constant"
    pairs = list(zip(levels, levels[1:]))
    if all(b >= a for a, b in pairs):
        return "increasing"
    if all(b <= a for a, b in pairs):
        return "decreasing"
    return "explicit"


def patterns_with_budget(total: int, branches: int, min_level: int = 1) -> List[BranchPattern]:
    """Every pattern of ``branches`` levels (each >= ``min_level``) summing to ``total``."""
    out = []
    for combo in itertools.product(range(min_level, total + 1), repeat=branches):
        if sum(combo) == total:
            out.append(BranchPattern(combo))
    return out


class MultiExitModel:
    """A backbone with ``M - 1`` branches attached; see :func:`attach_branches`."""

    def __init__(self, backbone: BackboneSpec, pattern: BranchPattern, branches: List[Branch]):
        self.backbone = backbone
        self.pattern = pattern
        self.branches = branches
        self._params: Optional[ParamSet] = None

    # -- structure ---------------------------------------------------------

    @property
    def M(self) -> int:
        return len(self.branches) + 1

    @property
    def num_classes(self) -> int:
        return self.backbone.num_classes

    def exit_stage(self, m: int) -> int:
        """Backbone stage whose output exit ``m`` (1-based) reads."""
        if not 1 <= m <= self.M:
            raise ValueError(f"exit {m} out of range 1..{self.M}")
        if m == self.M:
            return self.backbone.num_stages
        return self.backbone.attach_points[m - 1]

    def modules(self) -> List[Tuple[str, Module]]:
        out = [(f"stage{i + 1}", s) for i, s in enumerate(self.backbone.stages)]
        out += [(f"branch{i + 1}", b) for i, b in enumerate(self.branches)]
        out.append(("head", self.backbone.head))
        return out

    def materialize(self, seed: int = 0) -> "MultiExitModel":
        rng = np.random.default_rng(seed)
        for _, mod in self.modules():
            mod.materialize(rng)
        self._params = None
        return self

    @property
    def params(self) -> ParamSet:
        if self._params is None:
            named = []
            for prefix, mod in self.modules():
                named.extend(mod.named_parameters(prefix))
            self._params = ParamSet(named)
        return self._params

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self.modules():
            out.update(mod.named_buffers(prefix))
        return out

    def stage_param_names(self, stages: Sequence[int]) -> List[str]:
        names: List[str] = []
        for k in stages:
            names += self.params.names(f"stage{k}")
        return names

    def exit_param_names(self, m: int) -> List[str]:
        """Parameters unique to exit ``m``: its branch (or the head for m = M)."""
        return self.params.names("head" if m == self.M else f"branch{m}")

    def train(self, mode: bool = True) -> "MultiExitModel":
        for _, mod in self.modules():
            mod.train(mode)
        return self

    def eval(self) -> "MultiExitModel":
        return self.train(False)

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.backbone.name}|{self.pattern}|{self.num_classes}".encode())
        for name, p in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()[:16]

    # -- forward -----------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != self.backbone.input_shape:
            raise ValueError(
                f"input shape {tuple(x.shape[1:])} does not match backbone "
                f"{self.backbone.input_shape}")

    def run_stage(self, k: int, z: Tensor) -> Tensor:
        with op_scope(f"stage{k}"):
            return self.backbone.stages[k - 1](z)

    def run_exit(self, m: int, z: Tensor) -> Tensor:
        if m == self.M:
            with op_scope("head"):
                return self.backbone.head(z)
        with op_scope(f"branch{m}"):
            return self.branches[m - 1](z)

    def features(self, x: Tensor, upto: int) -> Tensor:
        """Backbone features after stage ``upto``."""
        self._check_input(x)
        z = x
        for k in range(1, upto + 1):
            z = self.run_stage(k, z)
        return z

    def forward_from(self, z: Tensor, after_stage: int) -> Tensor:
        """Continue the backbone from stage ``after_stage + 1`` to the final logits."""
        for k in range(after_stage + 1, self.backbone.num_stages + 1):
            z = self.run_stage(k, z)
        return self.run_exit(self.M, z)

    def forward_all(self, x: Tensor) -> List[Tensor]:
        """Logits of every exit; each shared stage is computed once."""
        self._check_input(x)
        taps = {self.exit_stage(m): m for m in range(1, self.M)}
        outs: List[Tensor] = []
        z = x
        for k in range(1, self.backbone.num_stages + 1):
            z = self.run_stage(k, z)
            if k in taps:
                outs.append(self.run_exit(taps[k], z))
        outs.append(self.run_exit(self.M, z))
        return outs

    def forward_to_exit(self, x: Tensor, m: int) -> Tensor:
        """Logits of exit ``m`` only, touching no stage after the one it reads."""
        z = self.features(x, self.exit_stage(m))
        return self.run_exit(m, z)

    __call__ = forward_all


def attach_branches(backbone: BackboneSpec, pattern: BranchPattern, se_ratio: int = 16,
                    reduction_bn: bool = True) -> MultiExitModel:
    """Attach one branch per eligible point, at the levels given by ``pattern``.

    An empty pattern yields the plain backbone (M = 1).
    """
    points = backbone.attach_points
    if pattern.levels and len(pattern.levels) != len(points):
        raise ValueError(
            f"{backbone.name} has {len(points)} eligible attach points (after stages "
            f"{points}); pattern {pattern} has {len(pattern.levels)} levels")
    target = backbone.stage_shapes[points[-1] - 1] if points else None
    branches = []
    for level, stage in zip(pattern.levels, points):
        c, h, _ = backbone.stage_shapes[stage - 1]
        spec = BranchSpec(level=level, stage_index=stage, input_channels=c, input_spatial=h,
                          num_classes=backbone.num_classes, target_channels=target[0],
                          target_spatial=target[1], se_ratio=se_ratio, reduction_bn=reduction_bn)
        branches.append(build_branch(spec))
    return MultiExitModel(backbone, pattern, branches)


def build_model(backbone: str, pattern: str | BranchPattern, num_classes: Optional[int] = None,
                input_size: Optional[int] = None, seed: Optional[int] = 0,
                se_ratio: int = 16, reduction_bn: bool = True) -> MultiExitModel:
    """Backbone by name + pattern; weights are allocated unless ``seed`` is None."""
    if isinstance(pattern, str):
        pattern = BranchPattern.parse(pattern)
    model = attach_branches(build_backbone(backbone, num_classes, input_size), pattern,
                            se_ratio=se_ratio, reduction_bn=reduction_bn)
    if seed is not None:
        model.materialize(seed)
    return model


def describe(model: MultiExitModel) -> str:
    """Layer table in the style: layer | output | definition."""
    rows: List[Tuple[str, str, str]] = []
    shape = model.backbone.input_shape
    taps = {model.exit_stage(m): m for m in range(1, model.M)}
    for k, stage in enumerate(model.backbone.stages, start=1):
        out = stage.out_shape(shape)
        rows.append((f"Stage{k}", f"{out[1]}x{out[2]}, {out[0]}", _summarize(stage)))
        if k in taps:
            m = taps[k]
            branch = model.branches[m - 1]
            lvl = branch.spec.level
            label = "Naive" if lvl == 0 else f"Level-{lvl}"
            rows.append((f"Classifier{m}", f"{label}: {model.num_classes}-d", _branch_summary(branch, out)))
        shape = out
    rows.append(("Final Classifier", f"{model.num_classes}-d", _summarize(model.backbone.head)))
    w = [max(len(r[i]) for r in rows + [("Layer", "Output", model.backbone.name)]) for i in range(3)]
    lines = [f"{'Layer':<{w[0]}} | {'Output':<{w[1]}} | {model.backbone.name} ({str(model.pattern) or 'no branches'})"]
    lines.append("-" * (sum(w) + 6))
    lines += [f"{a:<{w[0]}} | {b:<{w[1]}} | {c}" for a, b, c in rows]
    return "\n".join(lines)


def _summarize(mod: Module) -> str:
    parts = []
    for layer in (mod if isinstance(mod, Sequential) else [mod]):
        if isinstance(layer, (BatchNorm2d, ReLU, Flatten)):
            continue
        parts.append(repr(layer) if not isinstance(layer, BasicBlock)
                     else f"Basic({layer.in_channels}->{layer.out_channels}, stride={layer.stride})")
    return ", ".join(parts)


def _branch_summary(branch: Branch, in_shape) -> str:
    spec = branch.spec
    if spec.level == 0:
        return f"GAP {spec.num_classes}-d FC, softmax"
    k, s, p = spec.reduction
    c, t = spec.target_channels, spec.target_spatial
    seb = f"[SE-B,{2 * c}]" + (f"x{spec.level}" if spec.level > 1 else "")
    return (f"[{k}x{k},{c}] -> {t}x{t}, {c}; {seb} -> {t // 2}x{t // 2}, {2 * c}; "
            f"{spec.num_classes}-d FC, softmax")
