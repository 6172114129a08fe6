"""Pure-numpy implementations of the hot kernels.

This is the fallback backend used when the compiled extension
(``amortenc._kernels``) is unavailable, and the reference the extension
is tested against.  All functions accept float32 or float64 arrays and
preserve the input dtype; reductions for the quantization kernels run
in float64 regardless of input width.

Shapes are normalized by the dispatch layer (:mod:`amortenc.backend`):
row-wise kernels receive 2-D ``(rows, width)`` arrays, element-wise
kernels receive arrays of any shape.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

name = "python"


def gelu_fwd(x):
    return (0.5 * x * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))).astype(
        x.dtype, copy=False)


def gelu_bwd(x, dy):
    cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
    return (dy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = np.square(x - mean).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    y = xhat * gain + bias
    return (y.astype(x.dtype, copy=False),
            xhat.astype(x.dtype, copy=False),
            rstd[:, 0].astype(x.dtype, copy=False))


def layernorm_bwd(dy, xhat, rstd, gain):
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return (dx.astype(dy.dtype, copy=False),
            dgain.astype(dy.dtype, copy=False),
            dbias.astype(dy.dtype, copy=False))


def softmax_fwd(scores):
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(scores.dtype, copy=False)


def softmax_bwd(probs, dprobs):
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return (probs * (dprobs - inner)).astype(probs.dtype, copy=False)


def quantize_u8(x, scale, zero_point):
    t = x.astype(np.float64) / scale
    q = np.trunc(t + np.copysign(0.5, t)) + zero_point
    return np.clip(q, 0, 255).astype(np.uint8)


def dequantize_u8(q, scale, zero_point, dtype):
    return ((q.astype(np.float64) - zero_point) * scale).astype(dtype)
