"""Minimal reverse-mode autodiff over dense float64 tensors.

Operations record themselves on the owning ComputeGraph's tape during
the forward pass; backward replays the tape in exact reverse order.
Parameter gradients accumulate across backward calls until zeroed,
which the gradient-averaging sampler relies on.
"""

from __future__ import annotations

import numpy as np

from snbench.errors import NotScalarLoss


class Tensor:
    """Value plus lazily allocated same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def grad_add(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class RunningStats:
    """Exponential moving averages for tracked batch normalization."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)

    def copy(self) -> "RunningStats":
        out = RunningStats(len(self.mean))
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


class ComputeGraph:
    """Recording context: tape, parameter registry and train/eval mode."""

    def __init__(self, mode: str = "train"):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        self.mode = mode
        self.tape: list[tuple[Tensor, callable]] = []
        self.params: dict[str, Tensor] = {}

    @property
    def training(self) -> bool:
        return self.mode == "train"

    def train(self) -> "ComputeGraph":
        self.mode = "train"
        return self

    def eval(self) -> "ComputeGraph":
        self.mode = "eval"
        return self

    def register(self, name: str, t: Tensor) -> Tensor:
        self.params[name] = t
        return t

    def record(self, out: Tensor, bwd) -> Tensor:
        self.tape.append((out, bwd))
        return out

    def reset_tape(self) -> None:
        self.tape.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of everything the loss depends on.

        Activation gradients are rebuilt from scratch on every call;
        leaf (parameter) gradients accumulate across calls.
        """
        if loss.size != 1:
            raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        for out, _ in self.tape:
            if out is not loss:
                out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, bwd in reversed(self.tape):
            if out.grad is not None:
                bwd(out.grad)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()
