"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from snbench.autodiff import ComputeGraph, Tensor


def grad_check(loss_fn: Callable[[ComputeGraph], Tensor],
               params: dict[str, Tensor], epsilon: float = 1e-5) -> float:
    """Worst relative error between analytic and numeric gradients.

    ``loss_fn`` must rebuild the forward pass deterministically on each
    call (the parameters are perturbed in place between calls).  Every
    element of every parameter is probed with central differences.
    """
    g = ComputeGraph("train")
    loss = loss_fn(g)
    for p in params.values():
        p.zero_grad()
    g.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        an = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(loss_fn(ComputeGraph("train")).data)
            flat[i] = orig - epsilon
            f_minus = float(loss_fn(ComputeGraph("train")).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            denom = max(abs(an[i]), abs(numeric), 1e-3)
            worst = max(worst, abs(an[i] - numeric) / denom)
    return worst
