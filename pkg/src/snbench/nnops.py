"""Layer primitives with forward and backward rules.

Every function takes the recording ComputeGraph first, consumes and
returns Tensors, and registers a closure that routes the upstream
gradient to its inputs.  Convolution and 3x3 average pooling dispatch
to the selected kernel backend; everything else is plain numpy.
"""

from __future__ import annotations

import numpy as np

from snbench import backend
from snbench.autodiff import ComputeGraph, RunningStats, Tensor
from snbench.errors import BadKernelSize, BadLabel, DegenerateBatch, ShapeMismatch


def conv2d(g: ComputeGraph, x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects NCHW input and OIHW weight")
    kb, kc, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeMismatch(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if kc != x.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, weight expects {kc}")
    y = backend.conv2d_fwd(x.data, w.data, stride, padding)
    if b is not None:
        if b.shape != (kb,):
            raise ShapeMismatch("bias must be per-output-channel")
        y = y + b.data.reshape(1, -1, 1, 1)
    out = Tensor(y)
    h, wd = x.shape[2], x.shape[3]

    def bwd(gy):
        x.grad_add(backend.conv2d_bwd_input(gy, w.data, stride, padding, h, wd))
        w.grad_add(backend.conv2d_bwd_weight(x.data, gy, kh, stride, padding))
        if b is not None:
            b.grad_add(gy.sum(axis=(0, 2, 3)))

    return g.record(out, bwd)


def batch_norm(g: ComputeGraph, x: Tensor, gamma: Tensor | None, beta: Tensor | None,
               running: RunningStats | None, *, track: bool, affine: bool,
               eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over (batch, height, width).

    track=False normalizes with the current mini-batch statistics in
    both modes; track=True updates the running averages while training
    and applies them in eval.  Variance is the biased (1/N) estimate.
    """
    if x.data.ndim != 4:
        raise ShapeMismatch("batch_norm expects NCHW input")
    c = x.shape[1]
    if affine and (gamma is None or beta is None or gamma.shape != (c,) or beta.shape != (c,)):
        raise ShapeMismatch("affine batch_norm needs per-channel gamma/beta")
    if track and running is None:
        raise ShapeMismatch("track=True needs running statistics")
    axes = (0, 2, 3)
    use_running = track and not g.training
    if use_running:
        mean = running.mean
        var = running.var
    else:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if track and g.training:
            running.mean += momentum * (mean - running.mean)
            running.var += momentum * (var - running.var)
    if eps == 0.0 and np.any(var == 0.0):
        raise DegenerateBatch("zero batch variance with epsilon disabled")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    y = xhat
    if affine:
        y = y * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)
    out = Tensor(y)

    def bwd(gy):
        if affine:
            gamma.grad_add((gy * xhat).sum(axis=axes))
            beta.grad_add(gy.sum(axis=axes))
            gxhat = gy * gamma.data.reshape(1, -1, 1, 1)
        else:
            gxhat = gy
        istd = inv_std.reshape(1, -1, 1, 1)
        if use_running:
            x.grad_add(gxhat * istd)
            return
        m1 = gxhat.mean(axis=axes).reshape(1, -1, 1, 1)
        m2 = (gxhat * xhat).mean(axis=axes).reshape(1, -1, 1, 1)
        x.grad_add((gxhat - m1 - xhat * m2) * istd)

    return g.record(out, bwd)


def relu(g: ComputeGraph, x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))

    def bwd(gy):
        x.grad_add(gy * mask)

    return g.record(out, bwd)


def avgpool3x3(g: ComputeGraph, x: Tensor) -> Tensor:
    """3x3 window, stride 1, padding 1, divisor fixed at 9."""
    if x.data.ndim != 4:
        raise ShapeMismatch("avgpool3x3 expects NCHW input")
    out = Tensor(backend.avgpool3x3_fwd(x.data))

    def bwd(gy):
        x.grad_add(backend.avgpool3x3_bwd(gy))

    return g.record(out, bwd)


def global_avg_pool(g: ComputeGraph, x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch("global_avg_pool expects NCHW input")
    _, _, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(gy):
        x.grad_add(np.broadcast_to(gy[:, :, None, None], x.shape) / (h * w))

    return g.record(out, bwd)


def linear(g: ComputeGraph, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch("linear expects (B,F) input and (C,F) weight")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def bwd(gy):
        x.grad_add(gy @ w.data)
        w.grad_add(gy.T @ x.data)
        if b is not None:
            b.grad_add(gy.sum(axis=0))

    return g.record(out, bwd)


def add(g: ComputeGraph, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(gy):
        a.grad_add(gy)
        b.grad_add(gy)

    return g.record(out, bwd)


def add_n(g: ComputeGraph, tensors: list[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = add(g, out, t)
    return out


def concat_channels(g: ComputeGraph, tensors: list[Tensor]) -> Tensor:
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeMismatch("concat requires matching batch and spatial dims")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bwd(gy):
        for t, piece in zip(tensors, np.split(gy, splits, axis=1)):
            t.grad_add(piece)

    return g.record(out, bwd)


def zeroize(g: ComputeGraph, x: Tensor) -> Tensor:
    out = Tensor(np.zeros_like(x.data))

    def bwd(gy):
        pass

    return g.record(out, bwd)


def skip(g: ComputeGraph, x: Tensor) -> Tensor:
    out = Tensor(x.data)

    def bwd(gy):
        x.grad_add(gy)

    return g.record(out, bwd)


def scale(g: ComputeGraph, x: Tensor, factor) -> Tensor:
    """Multiply by a constant scalar or broadcastable array (no gradient
    flows into the factor); used for dropout masks."""
    f = np.asarray(factor, dtype=np.float64)
    out = Tensor(x.data * f)

    def bwd(gy):
        x.grad_add(gy * f)

    return g.record(out, bwd)


def pad_channels(g: ComputeGraph, x: Tensor, total: int) -> Tensor:
    c = x.shape[1]
    if c > total:
        raise ShapeMismatch(f"cannot pad {c} channels down to {total}")
    if c == total:
        return skip(g, x)
    shape = (x.shape[0], total) + x.shape[2:]
    y = np.zeros(shape, dtype=np.float64)
    y[:, :c] = x.data
    out = Tensor(y)

    def bwd(gy):
        x.grad_add(gy[:, :c])

    return g.record(out, bwd)


def softmax_cross_entropy(g: ComputeGraph, logits: Tensor, labels: np.ndarray) -> Tensor:
    if logits.data.ndim != 2:
        raise ShapeMismatch("logits must be (B, C)")
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,) or labels.dtype.kind not in "iu":
        raise BadLabel("labels must be integer class indices of length B")
    if labels.min() < 0 or labels.max() >= c:
        raise BadLabel(f"label out of range for {c} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        nll = -np.log(probs[np.arange(b), labels])
    out = Tensor(nll.mean())

    def bwd(gy):
        gl = probs.copy()
        gl[np.arange(b), labels] -= 1.0
        logits.grad_add(gl * (gy / b))

    return g.record(out, bwd)


# ---------------------------------------------------------------------------
# Weight-transform ops: channel slicing and kernel projection happen inside
# the graph so gradients land in the shared banks.

def take_out_channels(g: ComputeGraph, w: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0 by (unique) integer index."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(w.data[idx])

    def bwd(gy):
        if w.grad is None:
            w.grad = np.zeros_like(w.data)
        w.grad[idx] += gy

    return g.record(out, bwd)


def mix_out_channels(g: ComputeGraph, w: Tensor, m: np.ndarray) -> Tensor:
    """Linear recombination along axis 0: out[i] = sum_j m[i, j] * w[j]."""
    if m.shape[1] != w.shape[0]:
        raise ShapeMismatch("mixing matrix does not match channel count")
    out = Tensor(np.tensordot(m, w.data, axes=(1, 0)))

    def bwd(gy):
        w.grad_add(np.tensordot(m.T, gy, axes=(1, 0)))

    return g.record(out, bwd)


def slice_in_channels(g: ComputeGraph, w: Tensor, c: int) -> Tensor:
    if c > w.shape[1]:
        raise ShapeMismatch("cannot slice more input channels than stored")
    if c == w.shape[1]:
        return skip(g, w)
    out = Tensor(w.data[:, :c].copy())

    def bwd(gy):
        if w.grad is None:
            w.grad = np.zeros_like(w.data)
        w.grad[:, :c] += gy

    return g.record(out, bwd)


def ofa_project(g: ComputeGraph, w3: Tensor, proj: Tensor, target_size: int) -> Tensor:
    """Derive a small kernel from the stored 3x3 bank.

    target 3 returns the bank unchanged; target 1 takes the center tap
    and applies the learned output-channel projection matrix.
    """
    if target_size not in (1, 3):
        raise BadKernelSize(f"target kernel must be 1 or 3, got {target_size}")
    if w3.data.ndim != 4 or w3.shape[2] != 3 or w3.shape[3] != 3:
        raise BadKernelSize("stored bank must hold 3x3 kernels")
    if target_size == 3:
        return skip(g, w3)
    if proj.shape != (w3.shape[0], w3.shape[0]):
        raise ShapeMismatch("projection matrix must be (C_out, C_out)")
    center = w3.data[:, :, 1:2, 1:2]
    out = Tensor(np.tensordot(proj.data, center, axes=(1, 0)))

    def bwd(gy):
        proj.grad_add(np.tensordot(gy.reshape(gy.shape[0], -1), center.reshape(center.shape[0], -1).T, axes=(1, 0)))
        gcenter = np.tensordot(proj.data.T, gy, axes=(1, 0))
        if w3.grad is None:
            w3.grad = np.zeros_like(w3.data)
        w3.grad[:, :, 1:2, 1:2] += gcenter

    return g.record(out, bwd)
