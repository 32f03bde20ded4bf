"""Confidence-thresholded early exit: live prediction, trace replay, calibration.

A sample leaves at the first exit whose maximum softmax probability reaches
that exit's threshold; the last exit always accepts. Traces store the raw
logits of every exit so policies can be replayed without the network.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cost import FlopsReport, adaptive_flops
from .data import Dataset, to_float
from .model import MultiExitModel
from .tensor import Tensor, no_grad


def max_softmax(logits: np.ndarray) -> np.ndarray:
    """Largest softmax probability along the last axis, in float64.

    Shared by live prediction and trace replay so both make identical
    decisions on identical logits.
    """
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return 1.0 / np.exp(z).sum(axis=-1)


@dataclass(frozen=True)
class ExitPolicy:
    """Thresholds for exits 1..M-1; values above 1 disable an exit."""

    gammas: Tuple[float, ...]

    def __post_init__(self):
        g = tuple(float(v) for v in self.gammas)
        if any(not np.isfinite(v) or v < 0 for v in g):
            raise ValueError(f"thresholds must be finite and non-negative, got {g}")
        object.__setattr__(self, "gammas", g)

    @property
    def M(self) -> int:
        return len(self.gammas) + 1

    @classmethod
    def parse(cls, text: str) -> "ExitPolicy":
        text = text.strip()
        return cls(tuple(float(t) for t in text.split(",")) if text else ())

    def __str__(self) -> str:
        return ",".join(f"{g:g}" for g in self.gammas)


@dataclass
class LogitTrace:
    """Raw logits of shape (N, M, K) with labels; complete by construction."""

    logits: np.ndarray
    labels: np.ndarray
    fingerprint: str = ""

    def __post_init__(self):
        self.logits = np.ascontiguousarray(self.logits, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.logits.ndim != 3:
            raise ValueError(f"trace logits must be (N, M, K), got shape {self.logits.shape}")
        if self.labels.shape != (self.N,):
            raise ValueError(f"expected {self.N} labels, got shape {self.labels.shape}")
        if self.N and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise ValueError(f"labels outside [0, {self.K})")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("trace contains non-finite logits")

    @property
    def N(self) -> int:
        return self.logits.shape[0]

    @property
    def M(self) -> int:
        return self.logits.shape[1]

    @property
    def K(self) -> int:
        return self.logits.shape[2]

    def confidences(self) -> np.ndarray:
        """(N, M) max-softmax values."""
        return max_softmax(self.logits)

    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=2)

    def exit_accuracy(self) -> List[float]:
        correct = self.predictions() == self.labels[:, None]
        return correct.mean(axis=0).tolist()


def _check_policy(policy: ExitPolicy, M: int) -> None:
    if policy.M != M:
        raise ValueError(f"policy has {len(policy.gammas)} thresholds; a {M}-exit model needs {M - 1}")


def predict_adaptive(model: MultiExitModel, x: np.ndarray, policy: ExitPolicy) -> Tuple[int, int]:
    """Label and 1-based exit for one sample, computing no stage past the exit taken.

    ``x`` is a float image (C, H, W) or a batch of one.
    """
    _check_policy(policy, model.M)
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError(f"predict_adaptive takes one sample, got batch of {x.shape[0]}")
    model.eval()
    with no_grad():
        z = Tensor(x)
        model._check_input(z)
        done = 0
        for m in range(1, model.M + 1):
            k = model.exit_stage(m)
            for s in range(done + 1, k + 1):
                z = model.run_stage(s, z)
            done = k
            logits = model.run_exit(m, z).data[0]
            if m == model.M or max_softmax(logits) >= policy.gammas[m - 1]:
                return int(logits.argmax()), m
    raise AssertionError("unreachable")


def predict_adaptive_dataset(model: MultiExitModel, ds: Dataset, policy: ExitPolicy
                             ) -> Tuple[np.ndarray, np.ndarray]:
    preds, exits = np.empty(len(ds), np.int64), np.empty(len(ds), np.int64)
    for i in range(len(ds)):
        preds[i], exits[i] = predict_adaptive(model, to_float(ds.images[i : i + 1]), policy)
    return preds, exits


def export_trace(model: MultiExitModel, ds: Dataset) -> LogitTrace:
    """Logits of every exit for every sample, computed one sample at a time."""
    if model.num_classes != ds.num_classes:
        raise ValueError(f"model has {model.num_classes} classes, dataset {ds.num_classes}")
    model.eval()
    out = np.empty((len(ds), model.M, model.num_classes), np.float32)
    with no_grad():
        for i in range(len(ds)):
            x = Tensor(to_float(ds.images[i : i + 1]))
            for m, o in enumerate(model.forward_all(x)):
                out[i, m] = o.data[0]
    return LogitTrace(out, ds.labels.copy(), model.fingerprint())


def exit_indices(conf: np.ndarray, gammas: Sequence[float]) -> np.ndarray:
    """0-based exit per sample under the sequential threshold rule."""
    N, M = conf.shape
    exits = np.full(N, M - 1, dtype=np.int64)
    undecided = np.ones(N, dtype=bool)
    for i, g in enumerate(gammas):
        take = undecided & (conf[:, i] >= g)
        exits[take] = i
        undecided &= ~take
    return exits


@dataclass
class SimResult:
    adaptive_accuracy: float
    exit_rates: List[float]
    exit_counts: List[int]
    af: Optional[float]
    exits: np.ndarray = field(repr=False)
    predictions: np.ndarray = field(repr=False)

    def as_row(self) -> Dict[str, float]:
        row: Dict[str, float] = {"adaptive_accuracy": self.adaptive_accuracy}
        row.update({f"r{m}": r for m, r in enumerate(self.exit_rates, start=1)})
        row["af"] = self.af if self.af is not None else float("nan")
        return row


def simulate(trace: LogitTrace, policy: ExitPolicy, report: Optional[FlopsReport] = None) -> SimResult:
    """Replay ``policy`` on a trace; AF needs a cost report of the same model."""
    _check_policy(policy, trace.M)
    if report is not None and report.M != trace.M:
        raise ValueError(f"cost report has {report.M} exits, trace {trace.M}")
    if trace.N == 0:
        raise ValueError("empty trace")
    exits = exit_indices(trace.confidences(), policy.gammas)
    preds = trace.predictions()[np.arange(trace.N), exits]
    counts = np.bincount(exits, minlength=trace.M)
    rates = (counts / trace.N).tolist()
    af = adaptive_flops(report, rates) if report is not None else None
    return SimResult(float(np.mean(preds == trace.labels)), rates, counts.tolist(), af, exits + 1, preds)


@dataclass(frozen=True)
class Objective:
    """``min_flops``: lowest AF with accuracy >= target. ``max_accuracy``: best accuracy with AF <= target."""

    kind: str
    target: float

    def __post_init__(self):
        if self.kind not in ("min_flops", "max_accuracy"):
            raise ValueError(f"unknown objective {self.kind!r}")

    @classmethod
    def min_flops(cls, accuracy: float) -> "Objective":
        return cls("min_flops", accuracy)

    @classmethod
    def max_accuracy(cls, flops: float) -> "Objective":
        return cls("max_accuracy", flops)


class InfeasibleObjective(ValueError):
    def __init__(self, objective: Objective, best: float):
        what = "accuracy" if objective.kind == "min_flops" else "AF"
        super().__init__(f"no grid policy satisfies {objective.kind} target {objective.target:g}; "
                         f"best attainable {what} is {best:g}")
        self.objective, self.best = objective, best


def threshold_grid(step: float = 0.05) -> np.ndarray:
    if not 0 < step <= 1:
        raise ValueError(f"grid step must lie in (0, 1], got {step}")
    n = int(round(1.0 / step))
    if abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"grid step {step} does not divide 1")
    return np.round(np.arange(n + 1) * step, 10)


def calibrate(trace: LogitTrace, report: FlopsReport, objective: Objective,
              step: float = 0.05) -> ExitPolicy:
    """Exhaustive search of per-exit thresholds on the grid ``{0, step, ..., 1}``.

    Accuracy and AF are compared through integer counts, so ties are exact;
    they break toward lower AF, then the lexicographically smaller vector.
    """
    if report.M != trace.M:
        raise ValueError(f"cost report has {report.M} exits, trace {trace.M}")
    grid = threshold_grid(step)
    conf = trace.confidences()
    correct_at = trace.predictions() == trace.labels[:, None]
    path = np.asarray(report.path_costs(), dtype=np.int64)
    N = trace.N
    best_key, best_policy = None, None
    fallback = None  # best attainable value of the constrained quantity
    for combo in itertools.product(grid, repeat=trace.M - 1):
        exits = exit_indices(conf, combo)
        correct = int(correct_at[np.arange(N), exits].sum())
        cost = int(np.bincount(exits, minlength=trace.M) @ path)
        if objective.kind == "min_flops":
            fallback = correct if fallback is None else max(fallback, correct)
            if correct < objective.target * N - 1e-9:
                continue
            key = (cost, combo)
        else:
            fallback = cost if fallback is None else min(fallback, cost)
            if cost > objective.target * N * (1 + 1e-12):
                continue
            key = (-correct, cost, combo)
        if best_key is None or key < best_key:
            best_key, best_policy = key, combo
    if best_policy is None:
        best = fallback / N
        raise InfeasibleObjective(objective, best)
    return ExitPolicy(tuple(best_policy))


@dataclass
class Histogram:
    edges: np.ndarray
    correct: np.ndarray
    incorrect: np.ndarray

    def rows(self) -> List[Dict[str, float]]:
        return [{"bin_low": float(lo), "bin_high": float(hi), "correct": int(c), "incorrect": int(w)}
                for lo, hi, c, w in zip(self.edges[:-1], self.edges[1:], self.correct, self.incorrect)]


def confidence_histogram(trace: LogitTrace, m: int, bins: int = 10) -> Histogram:
    """Max-softmax counts at exit ``m`` (1-based) over [1/K, 1], split by correctness."""
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    if not 1 <= m <= trace.M:
        raise ValueError(f"exit {m} out of range 1..{trace.M}")
    edges = np.linspace(1.0 / trace.K, 1.0, bins + 1)
    conf = np.clip(trace.confidences()[:, m - 1], edges[0], edges[-1])
    ok = trace.predictions()[:, m - 1] == trace.labels
    correct, _ = np.histogram(conf[ok], bins=edges)
    incorrect, _ = np.histogram(conf[~ok], bins=edges)
    return Histogram(edges, correct, incorrect)


def threshold_sweep(trace: LogitTrace, report: FlopsReport, values: Sequence[float]) -> List[Dict[str, float]]:
    """One shared threshold applied at every exit, for accuracy/cost curves."""
    rows = []
    for g in values:
        res = simulate(trace, ExitPolicy((g,) * (trace.M - 1)), report)
        rows.append({"gamma": float(g), **res.as_row()})
    return rows
