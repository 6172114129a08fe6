"""Kernel backend selection.

At import time the compiled extension (:mod:`amortenc._kernels`) is
preferred when present; otherwise the pure-numpy twin
(:mod:`amortenc.kernels_np`) is used.  ``AMORTENC_BACKEND`` overrides
the choice: ``python`` forces the numpy backend, ``ext`` requires the
extension (import error if missing), ``auto`` is the default.

All entry points here take arrays of any leading shape; row-wise
kernels operate over the trailing axis.  Outputs are freshly allocated
and match the input dtype.  The two backends agree to floating-point
roundoff; nothing in the package depends on which one is active beyond
speed.
"""

import os
from contextlib import contextmanager

import numpy as np

from . import kernels_np

try:
    from . import _kernels
except ImportError:
    _kernels = None

_MODE = os.environ.get("AMORTENC_BACKEND", "auto").lower()
if _MODE not in ("auto", "python", "ext"):
    raise ValueError(f"AMORTENC_BACKEND must be auto|python|ext, got {_MODE!r}")
if _MODE == "ext" and _kernels is None:
    raise ImportError("AMORTENC_BACKEND=ext but amortenc._kernels is not built")

_active = _kernels if (_kernels is not None and _MODE != "python") else kernels_np


def active_backend() -> str:
    """Name of the backend in use: ``"ext"`` or ``"python"``."""
    return _active.name


def available_backends() -> tuple:
    return ("python", "ext") if _kernels is not None else ("python",)


@contextmanager
def use_backend(which: str):
    """Temporarily force a backend (benchmarks and parity tests only)."""
    global _active
    if which == "ext":
        if _kernels is None:
            raise ImportError("amortenc._kernels is not built")
        replacement = _kernels
    elif which == "python":
        replacement = kernels_np
    else:
        raise ValueError(f"unknown backend {which!r}")
    previous = _active
    _active = replacement
    try:
        yield
    finally:
        _active = previous


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    if _active is kernels_np:
        return kernels_np.gelu_fwd(x)
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    _active.gelu_fwd(flat, out)
    return out.reshape(x.shape)


def gelu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if _active is kernels_np:
        return kernels_np.gelu_bwd(x, dy)
    flat = np.ascontiguousarray(x).reshape(-1)
    dflat = np.ascontiguousarray(dy).reshape(-1)
    out = np.empty_like(flat)
    _active.gelu_bwd(flat, dflat, out)
    return out.reshape(x.shape)


def layernorm_fwd(x, gain, bias, eps=1e-5):
    """Normalize over the trailing axis; returns (y, xhat, rstd)."""
    rows = _rows(x)
    if _active is kernels_np:
        y, xhat, rstd = kernels_np.layernorm_fwd(rows, gain, bias, eps)
    else:
        y = np.empty_like(rows)
        xhat = np.empty_like(rows)
        rstd = np.empty(rows.shape[0], dtype=rows.dtype)
        _active.layernorm_fwd(rows, np.ascontiguousarray(gain),
                              np.ascontiguousarray(bias), eps, y, xhat, rstd)
    return (y.reshape(x.shape), xhat.reshape(x.shape),
            rstd.reshape(x.shape[:-1]))


def layernorm_bwd(dy, xhat, rstd, gain):
    """Returns (dx, dgain, dbias) for the trailing-axis layer norm."""
    drows = _rows(dy)
    xrows = _rows(xhat)
    rflat = np.ascontiguousarray(rstd).reshape(-1)
    if _active is kernels_np:
        dx, dgain, dbias = kernels_np.layernorm_bwd(drows, xrows, rflat, gain)
    else:
        dx = np.empty_like(drows)
        dgain = np.empty(drows.shape[1], dtype=drows.dtype)
        dbias = np.empty(drows.shape[1], dtype=drows.dtype)
        _active.layernorm_bwd(drows, xrows, rflat,
                              np.ascontiguousarray(gain), dx, dgain, dbias)
    return dx.reshape(dy.shape), dgain, dbias


def softmax_fwd(scores: np.ndarray) -> np.ndarray:
    """Softmax over the trailing axis."""
    rows = _rows(scores)
    if _active is kernels_np:
        out = kernels_np.softmax_fwd(rows)
    else:
        out = np.empty_like(rows)
        _active.softmax_fwd(rows, out)
    return out.reshape(scores.shape)


def softmax_bwd(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    prows = _rows(probs)
    drows = _rows(dprobs)
    if _active is kernels_np:
        out = kernels_np.softmax_bwd(prows, drows)
    else:
        out = np.empty_like(prows)
        _active.softmax_bwd(prows, drows, out)
    return out.reshape(probs.shape)


def quantize_u8(x: np.ndarray, scale: float, zero_point: int) -> np.ndarray:
    flat = np.ascontiguousarray(x).reshape(-1)
    if _active is kernels_np:
        out = kernels_np.quantize_u8(flat, scale, zero_point)
    else:
        if flat.dtype not in (np.float32, np.float64):
            flat = flat.astype(np.float64)
        out = np.empty(flat.shape[0], dtype=np.uint8)
        _active.quantize_u8(flat, scale, zero_point, out)
    return out.reshape(x.shape)


def dequantize_u8(q: np.ndarray, scale: float, zero_point: int,
                  dtype=np.float32) -> np.ndarray:
    flat = np.ascontiguousarray(q).reshape(-1)
    if _active is kernels_np:
        out = kernels_np.dequantize_u8(flat, scale, zero_point, dtype)
    else:
        out = np.empty(flat.shape[0], dtype=dtype)
        _active.dequantize_u8(flat, scale, zero_point, out)
    return out.reshape(q.shape)
