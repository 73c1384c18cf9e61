"""Kernel backend selection.

The convolution and pooling inner loops exist twice: a compiled Cython
extension (snbench._kernels) and a pure-numpy fallback defined here.
The backend is chosen once at import time; set SNB_BACKEND to
"compiled", "numpy" or "auto" (default) to override.  Both backends are
exact to the last ulp-level reassociation and are cross-checked in
tests/test_backend.py.
"""

from __future__ import annotations

import os

import numpy as np


def _np_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _np_im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Rearrange (B,Ci,H,W) into (Ci*k*k, B*Ho*Wo) patch columns.

    The (rows, columns) layout makes every conv pass one large GEMM.
    """
    b, ci, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = _np_pad(x, pad)
    cols = np.empty((ci, k, k, b, ho, wo), dtype=np.float64)
    src = xp.transpose(1, 0, 2, 3)
    for ky in range(k):
        for kx in range(k):
            cols[:, ky, kx] = src[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride]
    return cols.reshape(ci * k * k, b * ho * wo)


def np_conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    b, _, h, wd = x.shape
    co, ci, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if k == 1 and stride == 1 and pad == 0:
        y = w.reshape(co, ci) @ x.transpose(1, 0, 2, 3).reshape(ci, b * h * wd)
        return y.reshape(co, b, ho, wo).transpose(1, 0, 2, 3).copy()
    cols = _np_im2col(x, k, stride, pad)
    y = w.reshape(co, ci * k * k) @ cols
    return y.reshape(co, b, ho, wo).transpose(1, 0, 2, 3).copy()


def np_conv2d_bwd_input(gy: np.ndarray, w: np.ndarray, stride: int, pad: int, h: int, wd: int) -> np.ndarray:
    b, co, ho, wo = gy.shape
    _, ci, k, _ = w.shape
    gy_flat = gy.transpose(1, 0, 2, 3).reshape(co, b * ho * wo)
    if k == 1 and stride == 1 and pad == 0:
        gx = w.reshape(co, ci).T @ gy_flat
        return gx.reshape(ci, b, h, wd).transpose(1, 0, 2, 3).copy()
    gcols = w.reshape(co, ci * k * k).T @ gy_flat
    gcols = gcols.reshape(ci, k, k, b, ho, wo)
    gxp = np.zeros((ci, b, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            gxp[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += gcols[:, ky, kx]
    gxp = gxp.transpose(1, 0, 2, 3)
    if pad == 0:
        return gxp.copy()
    return gxp[:, :, pad:-pad, pad:-pad].copy()


def np_conv2d_bwd_weight(x: np.ndarray, gy: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    b, ci, h, wd = x.shape
    _, co, ho, wo = gy.shape
    gy_flat = gy.transpose(1, 0, 2, 3).reshape(co, b * ho * wo)
    if k == 1 and stride == 1 and pad == 0:
        gw = gy_flat @ x.transpose(1, 0, 2, 3).reshape(ci, b * h * wd).T
        return gw.reshape(co, ci, 1, 1)
    cols = _np_im2col(x, k, stride, pad)
    gw = gy_flat @ cols.T
    return gw.reshape(co, ci, k, k)


def np_avgpool3x3_fwd(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    xp = _np_pad(x, 1)
    y = np.zeros((b, c, h, w), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            y += xp[:, :, ky : ky + h, kx : kx + w]
    return y / 9.0

def np_avgpool3x3_bwd(gy: np.ndarray) -> np.ndarray:
    b, c, h, w = gy.shape
    gxp = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    g = gy / 9.0
    for ky in range(3):
        for kx in range(3):
            gxp[:, :, ky : ky + h, kx : kx + w] += g
    return gxp[:, :, 1:-1, 1:-1].copy()


_NUMPY_IMPL = {
    "conv2d_fwd": np_conv2d_fwd,
    "conv2d_bwd_input": np_conv2d_bwd_input,
    "conv2d_bwd_weight": np_conv2d_bwd_weight,
    "avgpool3x3_fwd": np_avgpool3x3_fwd,
    "avgpool3x3_bwd": np_avgpool3x3_bwd,
}


def _ascontig(fn):
    def wrapped(*args, **kw):
        args = tuple(
            np.ascontiguousarray(a, dtype=np.float64) if isinstance(a, np.ndarray) else a
            for a in args
        )
        return fn(*args, **kw)

    return wrapped


def _select_backend() -> tuple[str, dict]:
    mode = os.environ.get("SNB_BACKEND", "auto")
    if mode not in ("auto", "compiled", "numpy"):
        raise ValueError(f"SNB_BACKEND must be auto, compiled or numpy, got {mode!r}")
    if mode == "numpy":
        return "numpy", dict(_NUMPY_IMPL)
    try:
        from snbench import _kernels
    except ImportError:
        if mode == "compiled":
            raise ImportError("SNB_BACKEND=compiled but snbench._kernels is not built; run pip install -e . --no-build-isolation")
        return "numpy", dict(_NUMPY_IMPL)
    impl = {
        "conv2d_fwd": _ascontig(lambda x, w, stride, pad: _kernels.conv2d_fwd(x, w, stride, pad)),
        "conv2d_bwd_input": _ascontig(lambda gy, w, stride, pad, h, wd: _kernels.conv2d_bwd_input(gy, w, stride, pad, h, wd)),
        "conv2d_bwd_weight": _ascontig(lambda x, gy, k, stride, pad: _kernels.conv2d_bwd_weight(x, gy, k, stride, pad)),
        "avgpool3x3_fwd": _ascontig(lambda x: _kernels.avgpool3x3_fwd(x)),
        "avgpool3x3_bwd": _ascontig(lambda gy: _kernels.avgpool3x3_bwd(gy)),
    }
    return "compiled", impl


BACKEND_NAME, _IMPL = _select_backend()

conv2d_fwd = _IMPL["conv2d_fwd"]
conv2d_bwd_input = _IMPL["conv2d_bwd_input"]
conv2d_bwd_weight = _IMPL["conv2d_bwd_weight"]
avgpool3x3_fwd = _IMPL["avgpool3x3_fwd"]
avgpool3x3_bwd = _IMPL["avgpool3x3_bwd"]


def backend_name() -> str:
    return BACKEND_NAME
