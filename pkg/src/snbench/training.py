"""Super-net training loop and subnet evaluation."""

from __future__ import annotations

from typing import Callable

import numpy as np

from snbench import nnops
from snbench.autodiff import ComputeGraph
from snbench.errors import DivergedTraining
from snbench.optim import SGD, TrainProtocol, cosine_lr
from snbench.sampling import SamplerKind, SamplerState, fairnas_step
from snbench.space import ArchEncoding
from snbench.supernet import ChannelStrategy, SuperNet, activate_subnet, apply_path_dropout


def train_supernet(supernet: SuperNet, sampler: SamplerState, dataset,
                   protocol: TrainProtocol,
                   snapshot_every: int | None = None,
                   snapshot_fn: Callable[[int], dict] | None = None) -> list[dict]:
    """SGD with a per-epoch cosine schedule over sampled subnets.

    Each step draws one architecture (or runs the fairness multi-pass
    update), computes the loss on one mini-batch and updates the shared
    weights.  Returns per-epoch history records.
    """
    rng = np.random.default_rng(np.random.SeedSequence(protocol.seed))
    x_all, y_all = dataset.x_train, dataset.y_train
    n_used = int(len(x_all) * protocol.train_portion)
    if n_used < protocol.batch_size:
        raise DivergedTraining(
            f"train portion leaves {n_used} samples, fewer than one batch"
        )
    sgd = SGD(supernet.params, momentum=0.9, weight_decay=protocol.weight_decay)
    needs_rng = (
        supernet.mapping.dynamic_channel_strategy is ChannelStrategy.SHUFFLE
        or supernet.mapping.path_dropout_p > 0
        or supernet.mapping.global_dropout_p > 0
    )
    history: list[dict] = []
    for epoch in range(protocol.epochs):
        lr = cosine_lr(epoch, protocol.epochs, protocol.lr0)
        order = rng.permutation(n_used)
        losses = []
        for start in range(0, n_used - protocol.batch_size + 1, protocol.batch_size):
            idx = order[start : start + protocol.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if sampler.kind is SamplerKind.FAIRNAS:
                stats = fairnas_step(supernet, xb, yb, sampler.rng, sgd, lr)
                losses.append(stats.mean_loss)
                continue
            enc = sampler.next()
            view = activate_subnet(supernet, enc, rng=rng if needs_rng else None)
            if supernet.mapping.path_dropout_p > 0:
                view = apply_path_dropout(view, supernet.mapping.path_dropout_p, rng)
            g = ComputeGraph("train")
            logits = view.forward(g, xb, rng=rng)
            loss = nnops.softmax_cross_entropy(g, logits, yb)
            if not np.isfinite(loss.data):
                raise DivergedTraining(f"non-finite loss at epoch {epoch}")
            g.backward(loss)
            sgd.step(lr)
            sgd.zero_grad()
            losses.append(float(loss.data))
        record = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)), "steps": len(losses)}
        if snapshot_every and snapshot_fn and (epoch + 1) % snapshot_every == 0:
            record["snapshot"] = snapshot_fn(epoch)
        history.append(record)
    return history


def eval_subnet_accuracy(supernet: SuperNet, enc: ArchEncoding,
                         x: np.ndarray, y: np.ndarray, batch_size: int = 64,
                         rng: np.random.Generator | None = None) -> float:
    """Top-1 accuracy of one activated subnet over a fixed eval set."""
    view = activate_subnet(supernet, enc, rng=rng)
    correct = 0
    for start in range(0, len(x), batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        g = ComputeGraph("eval")
        logits = view.forward(g, xb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / len(x)


def eval_standalone_accuracy(net, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    correct = 0
    for start in range(0, len(x), batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        g = ComputeGraph("eval")
        logits = net.forward(g, xb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / len(x)
