"""SGD with momentum and coupled L2 decay, plus the cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from snbench.autodiff import Tensor


@dataclass(frozen=True)
class TrainProtocol:
    """Hyper-parameters of one training recipe."""

    lr0: float
    epochs: int
    weight_decay: float = 0.0
    batch_size: int = 64
    train_portion: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.train_portion <= 1:
            raise ValueError("train_portion must be in (0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_json(self) -> dict:
        return {
            "lr0": self.lr0,
            "epochs": self.epochs,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "train_portion": self.train_portion,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "TrainProtocol":
        return TrainProtocol(**obj)


def cosine_lr(epoch: float, total_epochs: int, lr0: float) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class SGD:
    """w <- w - lr * v with v the momentum buffer; decay is coupled
    (g <- g + wd * w before the momentum update)."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float, grad_scale: float = 1.0) -> None:
        if lr < 0:
            raise ValueError("lr must be >= 0")
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * grad_scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
                self._velocity[name] = v
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
