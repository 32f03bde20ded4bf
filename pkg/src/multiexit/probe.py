"""Feature-reconstruction probe between a branched model and its baseline.

A reconstructor maps the branched model's stage-i features onto the
baseline's stage-i features: a linear 1x1 convolution ``F_0`` followed by
``N`` blocks of 3x3 convolution, batch norm and ReLU. The reconstructed
features are then pushed through the rest of the baseline, and the baseline's
accuracy on them measures how much of its feature hierarchy survived.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import functional as F
from .data import Dataset, batches
from .model import MultiExitModel
from .nn import BatchNorm2d, Conv2d, Module, ReLU, Sequential
from .optim import ParamSet, sgd_step, step_decay_lr
from .tensor import DEFAULT_DTYPE, Tensor, no_grad


@dataclass(frozen=True)
class ReconstructorSpec:
    N: int
    channels_in: int
    channels_out: int
    spatial: int

    def __post_init__(self):
        if self.N < 0:
            raise ValueError(f"fuzziness level must be >= 0, got {self.N}")
        if min(self.channels_in, self.channels_out, self.spatial) < 1:
            raise ValueError(f"invalid reconstructor dims {self}")

    @property
    def shape_in(self) -> Tuple[int, int, int]:
        return (self.channels_in, self.spatial, self.spatial)

    @property
    def shape_out(self) -> Tuple[int, int, int]:
        return (self.channels_out, self.spatial, self.spatial)


def build_reconstructor(spec: ReconstructorSpec, rng: Optional[np.random.Generator] = None,
                        init: str = "random") -> Sequential:
    """``F_0`` (1x1 conv with bias) then N conv3x3+BN+ReLU blocks.

    ``init="identity"`` sets ``F_0`` to the identity map (needs equal channel
    counts); otherwise weights are He-initialized from ``rng``.
    """
    cout = spec.channels_out
    layers: List[Module] = [Conv2d(spec.channels_in, cout, 1, bias=True)]
    names = ["f0"]
    for i in range(1, spec.N + 1):
        layers += [Conv2d(cout, cout, 3, 1, 1), BatchNorm2d(cout), ReLU()]
        names += [f"f{i}_conv", f"f{i}_bn", f"f{i}_relu"]
    net = Sequential(*layers, names=names)
    net.materialize(rng if rng is not None else np.random.default_rng(0))
    if init == "identity":
        if spec.channels_in != cout:
            raise ValueError("identity init needs channels_in == channels_out")
        net[0].weight.data[...] = np.eye(cout, dtype=DEFAULT_DTYPE)[:, :, None, None]
    elif init != "random":
        raise ValueError(f"unknown init {init!r}")
    return net


@dataclass
class FitConfig:
    """SGD budget: ``lr`` multiplied by ``decay`` every ``decay_every`` epochs."""

    epochs: int = 10
    lr: float = 0.01
    decay: float = 0.1
    decay_every: int = 3
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    held_out: float = 0.2
    warm_start: bool = True


def _check_pair(source: np.ndarray, target: np.ndarray, spec: ReconstructorSpec) -> None:
    if len(source) != len(target):
        raise ValueError(f"unpaired features: {len(source)} source vs {len(target)} target samples")
    if tuple(source.shape[1:]) != spec.shape_in:
        raise ValueError(f"source features {source.shape[1:]} do not match {spec.shape_in}")
    if tuple(target.shape[1:]) != spec.shape_out:
        raise ValueError(f"target features {target.shape[1:]} do not match {spec.shape_out}")


def _least_squares_f0(net: Sequential, source: np.ndarray, target: np.ndarray) -> None:
    """Closed-form per-pixel linear fit of ``F_0`` (the 1x1 conv is a channel map)."""
    cin, cout = source.shape[1], target.shape[1]
    X = source.transpose(0, 2, 3, 1).reshape(-1, cin).astype(np.float64)
    Y = target.transpose(0, 2, 3, 1).reshape(-1, cout).astype(np.float64)
    X1 = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    sol, *_ = np.linalg.lstsq(X1, Y, rcond=None)
    net[0].weight.data[...] = sol[:cin].T[:, :, None, None].astype(DEFAULT_DTYPE)
    net[0].bias.data[...] = sol[cin].astype(DEFAULT_DTYPE)


def _pass_through_blocks(net: Sequential, source: np.ndarray) -> None:
    """Set each conv+BN block to reproduce its input (exact in eval mode)."""
    with no_grad():
        net.eval()
        z = net[0](Tensor(source)).data
        for i in range(1, len(net), 3):
            conv, bn = net[i], net[i + 1]
            c = conv.out_channels
            w = np.zeros_like(conv.weight.data)
            w[np.arange(c), np.arange(c), 1, 1] = 1.0
            conv.weight.data[...] = w
            mean = z.mean(axis=(0, 2, 3))
            var = z.var(axis=(0, 2, 3))
            bn._buffers["running_mean"][...] = mean
            bn._buffers["running_var"][...] = var
            bn._params["gamma"].data[...] = np.sqrt(var + bn.eps)
            bn._params["beta"].data[...] = mean
            z = np.maximum(z, 0.0)
    net.train()


def reconstruction_mse(net: Module, source: np.ndarray, target: np.ndarray, batch_size: int = 256) -> float:
    net.eval()
    total = 0.0
    with no_grad():
        for s in range(0, len(source), batch_size):
            out = net(Tensor(source[s : s + batch_size])).data.astype(np.float64)
            total += float(np.sum((out - target[s : s + batch_size]) ** 2))
    return total / target.size


@dataclass
class FitResult:
    net: Sequential
    train_mse: float
    held_out_mse: float


def fit_reconstructor(source: np.ndarray, target: np.ndarray, spec: ReconstructorSpec,
                      config: Optional[FitConfig] = None, seed: int = 0) -> FitResult:
    """Fit a reconstructor by SGD on mean squared error.

    With ``warm_start`` the linear map starts at its least-squares solution
    and the nonlinear blocks start as pass-throughs, so extra blocks begin no
    worse than the linear fit on non-negative targets.
    """
    config = config or FitConfig()
    source = np.asarray(source, dtype=DEFAULT_DTYPE)
    target = np.asarray(target, dtype=DEFAULT_DTYPE)
    _check_pair(source, target, spec)
    rng = np.random.default_rng(seed)
    n = len(source)
    order = rng.permutation(n)
    n_hold = int(round(n * config.held_out)) if n > 4 else 0
    hold, fit = order[:n_hold], order[n_hold:]
    src, tgt = source[fit], target[fit]

    net = build_reconstructor(spec, rng)
    if config.warm_start:
        _least_squares_f0(net, src, tgt)
        _pass_through_blocks(net, src)
    params = ParamSet(net.named_parameters("rec"))
    bs = min(config.batch_size, len(src))
    for epoch in range(config.epochs):
        lr = step_decay_lr(config.lr, epoch, config.decay_every, config.decay)
        net.train()
        perm = rng.permutation(len(src))
        for s in range(0, len(src) - bs + 1, bs):
            idx = perm[s : s + bs]
            loss = F.mse(net(Tensor(src[idx])), Tensor(tgt[idx]))
            params.zero_grad()
            loss.backward()
            sgd_step(params, lr, config.momentum, config.weight_decay)
    train_mse = reconstruction_mse(net, src, tgt)
    held = reconstruction_mse(net, source[hold], target[hold]) if n_hold else train_mse
    return FitResult(net, train_mse, held)


def stage_features(model: MultiExitModel, ds: Dataset, stage: int, batch_size: int = 256) -> np.ndarray:
    """Eval-mode backbone features after ``stage`` for every sample."""
    model.eval()
    chunks = []
    with no_grad():
        for x, _ in batches(ds, batch_size):
            chunks.append(model.features(Tensor(x), stage).data)
    return np.concatenate(chunks)


def _check_stage(model: MultiExitModel, stage: int) -> None:
    if not 1 <= stage <= model.backbone.num_stages:
        raise ValueError(f"stage {stage} out of range 1..{model.backbone.num_stages}")


def substitute_accuracy(baseline: MultiExitModel, branched: MultiExitModel, stage: int,
                        reconstructor: Module, ds: Dataset, batch_size: int = 256) -> float:
    """Baseline accuracy when its stage-``stage`` features are replaced by reconstructed ones."""
    _check_stage(baseline, stage)
    _check_stage(branched, stage)
    baseline.eval()
    branched.eval()
    reconstructor.eval()
    correct = 0
    with no_grad():
        for x, y in batches(ds, batch_size):
            z = branched.features(Tensor(x), stage)
            logits = baseline.forward_from(reconstructor(z), stage)
            correct += int(np.sum(logits.data.argmax(axis=1) == y))
    return correct / len(ds)


@dataclass
class ProbeResult:
    stage: int
    N: int
    accuracy_mean: float
    accuracy_std: float
    mse_mean: float
    accuracies: List[float] = field(default_factory=list)
    mses: List[float] = field(default_factory=list)

    def rows(self) -> List[dict]:
        return [{"stage": self.stage, "N": self.N, "repeat": r, "mse": m, "accuracy": a}
                for r, (m, a) in enumerate(zip(self.mses, self.accuracies))]


def substitute_eval(baseline: MultiExitModel, branched: MultiExitModel, stage: int, N: int,
                    fit_ds: Dataset, eval_ds: Dataset, repeats: int = 3,
                    config: Optional[FitConfig] = None, seed: int = 0) -> ProbeResult:
    """Fit ``repeats`` reconstructors with fresh seeds and report substitution accuracy."""
    _check_stage(baseline, stage)
    _check_stage(branched, stage)
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    src = stage_features(branched, fit_ds, stage)
    tgt = stage_features(baseline, fit_ds, stage)
    c_out, h, _ = tgt.shape[1:]
    spec = ReconstructorSpec(N, src.shape[1], c_out, h)
    accs, mses = [], []
    for r in range(repeats):
        fitted = fit_reconstructor(src, tgt, spec, config, seed=seed + r)
        mses.append(fitted.held_out_mse)
        accs.append(substitute_accuracy(baseline, branched, stage, fitted.net, eval_ds))
    return ProbeResult(stage, N, float(np.mean(accs)), float(np.std(accs)), float(np.mean(mses)),
                       accs, mses)


def write_probe_csv(results: List[ProbeResult], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["stage", "N", "repeat", "mse", "accuracy"])
        writer.writeheader()
        for res in results:
            writer.writerows(res.rows())
