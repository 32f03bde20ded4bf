"""Joint and distillation losses, teachers, and the three training strategies."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import functional as F
from .data import Dataset, batches, to_float
from .model import MultiExitModel
from .optim import linear_decay_lr, sgd_step
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

STRATEGIES = ("coop", "branches_only", "stage_wise")
TEACHERS = ("none", "dk", "ofa", "med", "wed")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_initial: float = 0.01
    lr_schedule: str = "linear"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 0.9
    tau: float = 1.0
    strategy: str = "coop"
    teacher: str = "none"
    teacher_checkpoint: str = ""
    kl_direction: str = "teacher_student"
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.teacher not in TEACHERS:
            raise ValueError(f"teacher must be one of {TEACHERS}, got {self.teacher!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        if self.lr_schedule != "linear":
            raise ValueError(f"unsupported lr schedule {self.lr_schedule!r}")
        if self.kl_direction not in ("teacher_student", "student_teacher"):
            raise ValueError(f"bad kl_direction {self.kl_direction!r}")


@dataclass
class TeacherOutput:
    logits: np.ndarray
    accuracy: Optional[float] = None


def wed_weights(M: int) -> np.ndarray:
    """Ensemble weights j / sum(1..M) for exits j = 1..M."""
    j = np.arange(1, M + 1, dtype=np.float64)
    return j / j.sum()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def joint_loss_from_logits(outputs: Sequence[Tensor], labels: np.ndarray) -> Tensor:
    loss = F.cross_entropy(outputs[0], labels)
    for out in outputs[1:]:
        loss = loss + F.cross_entropy(out, labels)
    return loss


def joint_loss(model: MultiExitModel, x, labels: np.ndarray) -> Tensor:
    """Unweighted sum of the per-exit batch-mean cross-entropies."""
    return joint_loss_from_logits(model.forward_all(_as_tensor(x)), labels)


def teacher_from_outputs(kind: str, outputs: Sequence[Tensor], labels: Optional[np.ndarray] = None,
                         baseline_logits: Optional[np.ndarray] = None) -> TeacherOutput:
    """Teacher logits built from already computed exit outputs (never differentiated)."""
    M = len(outputs)
    if kind == "dk":
        if baseline_logits is None:
            raise ValueError("dark-knowledge teacher needs a frozen baseline model")
        logits = np.asarray(baseline_logits)
    elif kind == "ofa":
        logits = outputs[-1].data.copy()
    elif kind == "med":
        logits = sum(o.data for o in outputs) / M
    elif kind == "wed":
        w = wed_weights(M)
        logits = sum(float(a) * o.data for a, o in zip(w, outputs))
    else:
        raise ValueError(f"unknown teacher {kind!r}")
    logits = np.asarray(logits, dtype=outputs[0].dtype)
    acc = None
    if labels is not None:
        acc = float(np.mean(logits.argmax(axis=1) == labels))
    return TeacherOutput(logits, acc)


def teacher_logits(kind: str, model: MultiExitModel, x, labels: Optional[np.ndarray] = None,
                   baseline: Optional[MultiExitModel] = None) -> TeacherOutput:
    """Teacher prediction before softmax for one batch.

    ``dk`` uses the frozen ``baseline``'s final exit; ``ofa`` the model's last
    exit; ``med`` the plain mean of all exits; ``wed`` the j-weighted ensemble.
    """
    x = _as_tensor(x)
    base = None
    if kind == "dk":
        if baseline is None:
            raise ValueError("dark-knowledge teacher needs a frozen baseline model")
        with no_grad():
            base = baseline.forward_to_exit(x, baseline.M).data
    with no_grad():
        outputs = model.forward_all(x)
    return teacher_from_outputs(kind, outputs, labels, base)


def kl_term(teacher: np.ndarray, student: Tensor, tau: float, direction: str = "teacher_student") -> Tensor:
    t = Tensor(teacher)
    if direction == "teacher_student":
        return F.kl_divergence(t, student, tau)
    return F.kl_divergence(student, t, tau)


def distill_from_outputs(outputs: Sequence[Tensor], labels: np.ndarray, teacher: np.ndarray,
                         lam: float, tau: float, direction: str = "teacher_student") -> Tensor:
    joint = joint_loss_from_logits(outputs, labels)
    if lam == 1.0:
        return joint
    kl = kl_term(teacher, outputs[0], tau, direction)
    for out in outputs[1:]:
        kl = kl + kl_term(teacher, out, tau, direction)
    return joint * lam + kl * (tau * tau * (1.0 - lam))


def distill_loss(model: MultiExitModel, x, labels: np.ndarray, config: TrainConfig,
                 baseline: Optional[MultiExitModel] = None) -> Tensor:
    """``lam * joint + tau^2 (1 - lam) * sum_i KL(teacher || exit_i)`` on one batch."""
    if config.teacher == "none":
        raise ValueError("distill_loss needs a teacher")
    x = _as_tensor(x)
    base = None
    if config.teacher == "dk":
        if baseline is None:
            raise ValueError("dark-knowledge teacher needs a frozen baseline model")
        with no_grad():
            base = baseline.forward_to_exit(x, baseline.M).data
    outputs = model.forward_all(x)
    teacher = teacher_from_outputs(config.teacher, outputs, baseline_logits=base).logits
    return distill_from_outputs(outputs, labels, teacher, config.lam, config.tau, config.kl_direction)


def evaluate(model: MultiExitModel, ds: Dataset, batch_size: int = 256) -> List[float]:
    """Top-1 accuracy of every exit (eval mode, restores the previous mode)."""
    was_training = model.backbone.stages[0].training
    model.eval()
    correct = np.zeros(model.M)
    with no_grad():
        for x, y in batches(ds, batch_size):
            for m, out in enumerate(model.forward_all(Tensor(x))):
                correct[m] += np.sum(out.data.argmax(axis=1) == y)
    model.train(was_training)
    return (correct / len(ds)).tolist()


@dataclass
class TrainResult:
    history: List[Dict] = field(default_factory=list)

    def column(self, key: str) -> List:
        return [row[key] for row in self.history]


class _Phase:
    """What one training phase optimizes and which exits it reads."""

    def __init__(self, name: str, trainable: List[str], exits: List[int], frozen_stages: int):
        self.name, self.trainable, self.exits, self.frozen_stages = name, trainable, exits, frozen_stages


def _phases(model: MultiExitModel, strategy: str) -> List[_Phase]:
    M, S = model.M, model.backbone.num_stages
    if strategy == "coop":
        return [_Phase("coop", model.params.names(), list(range(1, M + 1)), 0)]
    if strategy == "branches_only":
        backbone = model.stage_param_names(range(1, S + 1)) + model.exit_param_names(M)
        branches = [n for m in range(1, M) for n in model.exit_param_names(m)]
        phases = [_Phase("backbone", backbone, [M], 0)]
        if M > 1:
            phases.append(_Phase("branches", branches, list(range(1, M)), model.exit_stage(M - 1)))
        return phases
    phases = []
    prev = 0
    for m in range(1, M + 1):
        k = model.exit_stage(m)
        names = model.stage_param_names(range(prev + 1, k + 1)) + model.exit_param_names(m)
        phases.append(_Phase(f"stage{m}", names, [m], prev))
        prev = k
    return phases


def _set_modes(model: MultiExitModel, frozen_stages: int) -> None:
    model.train()
    for k in range(1, frozen_stages + 1):
        model.backbone.stages[k - 1].eval()


def _phase_outputs(model: MultiExitModel, x: Tensor, phase: _Phase) -> List[Tensor]:
    if phase.name == "coop":
        return model.forward_all(x)
    taps = {}
    z = x
    with no_grad():
        for k in range(1, phase.frozen_stages + 1):
            z = model.run_stage(k, z)
            taps[k] = z
    done = phase.frozen_stages
    outs = []
    for m in phase.exits:
        k = model.exit_stage(m)
        for s in range(done + 1, k + 1):
            z = model.run_stage(s, z)
            taps[s] = z
        done = max(done, k)
        outs.append(model.run_exit(m, taps[k] if k in taps else z))
    return outs


def train(model: MultiExitModel, train_ds: Dataset, config: TrainConfig,
          eval_ds: Optional[Dataset] = None, baseline: Optional[MultiExitModel] = None,
          metrics_path: Optional[str] = None) -> TrainResult:
    """Train ``model`` in place with the configured strategy and loss.

    Each phase runs ``config.epochs`` epochs with its own linear decay, so
    stage-wise training costs M times the cooperative budget.
    """
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    if config.teacher == "dk" and baseline is None:
        raise ValueError("dark-knowledge teacher needs a frozen baseline model")
    if baseline is not None:
        baseline.eval()
    rng = np.random.default_rng(config.seed)
    params = model.params
    result = TrainResult()
    epoch_counter = 0
    for phase in _phases(model, config.strategy):
        params.freeze_all_except(phase.trainable)
        params.reset_momentum()
        use_teacher = config.teacher != "none" and phase.name == "coop"
        for epoch in range(config.epochs):
            lr = linear_decay_lr(config.lr_initial, epoch, config.epochs)
            _set_modes(model, phase.frozen_stages)
            t0 = time.perf_counter()
            total, seen = 0.0, 0
            correct = np.zeros(model.M)
            t_correct = 0
            for xb, yb in batches(train_ds, config.batch_size, rng, flip=config.flip, drop_last=True):
                x = Tensor(xb)
                outs = _phase_outputs(model, x, phase)
                if use_teacher:
                    base = None
                    if config.teacher == "dk":
                        with no_grad():
                            base = baseline.forward_to_exit(x, baseline.M).data
                    teacher = teacher_from_outputs(config.teacher, outs, yb, base)
                    t_correct += teacher.accuracy * len(yb)
                    loss = distill_from_outputs(outs, yb, teacher.logits, config.lam, config.tau,
                                                config.kl_direction)
                else:
                    loss = joint_loss_from_logits(outs, yb)
                params.zero_grad()
                loss.backward()
                sgd_step(params, lr, config.momentum, config.weight_decay)
                total += loss.item() * len(yb)
                seen += len(yb)
                for m, out in zip(phase.exits, outs):
                    correct[m - 1] += np.sum(out.data.argmax(axis=1) == yb)
            epoch_counter += 1
            row = {"epoch": epoch_counter, "phase": phase.name, "lr": lr, "loss": total / seen}
            for m in range(1, model.M + 1):
                row[f"train_acc_{m}"] = correct[m - 1] / seen if m in phase.exits else float("nan")
            if eval_ds is not None:
                for m, acc in enumerate(evaluate(model, eval_ds), start=1):
                    row[f"eval_acc_{m}"] = acc
            row["teacher_acc"] = t_correct / seen if use_teacher else float("nan")
            result.history.append(row)
            logger.info("epoch %d (%s) lr=%.5f loss=%.4f %.1fs", epoch_counter, phase.name, lr,
                        row["loss"], time.perf_counter() - t0)
    params.unfreeze()
    model.eval()
    if metrics_path:
        write_metrics(result.history, metrics_path)
    return result


def write_metrics(rows: List[Dict], path: str) -> None:
    if not rows:
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def predict_all(model: MultiExitModel, images: np.ndarray, batch_size: int = 256) -> List[np.ndarray]:
    """Eval-mode logits of every exit for a uint8 image array."""
    model.eval()
    outs: List[List[np.ndarray]] = [[] for _ in range(model.M)]
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(to_float(images[start : start + batch_size]))
            for m, o in enumerate(model.forward_all(x)):
                outs[m].append(o.data)
    return [np.concatenate(o) for o in outs]
