"""Parameter bookkeeping and SGD with momentum."""

from __future__ import annotations

from typing import Dict, Iterable, Iterator, Optional, Tuple

import numpy as np

from .nn import Parameter


class ParamSet:
    """Named parameters with momentum buffers and a frozen set.

    Names carry the model's scope prefixes (``stage2.0.conv1.weight``,
    ``branch1.red.weight``), so backbone prefixes up to stage ``i`` select the
    parameters shared by every exit at or after ``i``.
    """

    def __init__(self, named: Iterable[Tuple[str, Parameter]]):
        self.params: Dict[str, Parameter] = {}
        for name, p in named:
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.params[name] = p
        self.velocity: Dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()

    def __iter__(self) -> Iterator[Tuple[str, Parameter]]:
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def names(self, prefix: Optional[str] = None) -> list[str]:
        if prefix is None:
            return list(self.params)
        return [n for n in self.params if n == prefix or n.startswith(prefix + ".")]

    def freeze(self, names: Iterable[str]) -> None:
        self.frozen.update(names)

    def unfreeze(self, names: Optional[Iterable[str]] = None) -> None:
        if names is None:
            self.frozen.clear()
        else:
            self.frozen.difference_update(names)

    def freeze_all_except(self, trainable: Iterable[str]) -> None:
        keep = set(trainable)
        self.frozen = {n for n in self.params if n not in keep}

    def trainable(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def reset_momentum(self) -> None:
        self.velocity.clear()

    def checksum(self, names: Optional[Iterable[str]] = None) -> str:
        """Hex digest over the raw bytes of the selected parameters."""
        import hashlib

        h = hashlib.sha256()
        for n in sorted(names if names is not None else self.params):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """One SGD update on every non-frozen parameter.

    ``v <- momentum * v + (grad + weight_decay * w)``; ``w <- w - lr * v``.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name in params.trainable():
        p = params.params[name]
        if p.grad is None:
            raise ValueError(f"trainable parameter {name!r} has no gradient")
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = params.velocity.get(name)
        if v is None or not momentum:
            v = np.array(d, dtype=p.data.dtype, copy=True)
        else:
            v *= momentum
            v += d
        params.velocity[name] = v
        p.data -= (lr * v).astype(p.data.dtype, copy=False)


def linear_decay_lr(lr_initial: float, epoch: int, epochs: int) -> float:
    """Learning rate for ``epoch`` (0-based) under linear decay to zero at ``epochs``."""
    return lr_initial * (1.0 - epoch / epochs)


def step_decay_lr(lr_initial: float, epoch: int, every: int = 3, factor: float = 0.1) -> float:
    return lr_initial * factor ** (epoch // every)
