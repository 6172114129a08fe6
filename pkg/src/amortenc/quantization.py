"""Re-encode extracted features at reduced bit width for storage.

Supported schemes: ``f32`` (identity), ``f16`` (storage dtype, round to
nearest even), ``u8`` (affine: ``q = clamp(round(x / scale) + zp, 0,
255)`` with round-half-away-from-zero), and ``bit1`` (sign function
with ``sign(0) = +1``; dequantizes to +/-1).  One-bit payloads pack
each trailing-axis row MSB-first, rows padded to byte boundaries.

Affine calibration follows the standard static min/max observer: the
range always includes zero, which keeps the zero point exact and bounds
the round-trip error of in-range values by ``scale / 2``.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import backend
from .errors import FormatError, InputError, ParameterError

SCALE_FLOOR = 1e-12

KIND_F32 = "f32"
KIND_F16 = "f16"
KIND_U8 = "u8"
KIND_BIT1 = "bit1"

_BITS = {KIND_F32: 32, KIND_F16: 16, KIND_U8: 8, KIND_BIT1: 1}


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ParameterError(f"scale must be positive, got {self.scale}")
        if not 0 <= self.zero_point <= 255:
            raise ParameterError(
                f"zero_point must be in [0, 255], got {self.zero_point}")


@dataclass(frozen=True)
class QuantScheme:
    kind: str
    params: Optional[QuantParams] = None

    def __post_init__(self):
        if self.kind not in _BITS:
            raise ParameterError(f"unknown quantization scheme {self.kind!r}")
        if self.kind == KIND_U8 and self.params is None:
            raise ParameterError("u8 scheme requires calibrated QuantParams")
        if self.kind != KIND_U8 and self.params is not None:
            raise ParameterError(f"{self.kind} scheme takes no QuantParams")

    @property
    def bits_per_element(self) -> int:
        return _BITS[self.kind]


F32 = QuantScheme(KIND_F32)
F16 = QuantScheme(KIND_F16)
BIT1 = QuantScheme(KIND_BIT1)


def u8_scheme(params: QuantParams) -> QuantScheme:
    return QuantScheme(KIND_U8, params)


@dataclass(frozen=True)
class QuantizedFeatures:
    scheme: QuantScheme
    shape: Tuple[int, ...]
    payload: bytes

    def __post_init__(self):
        expected = payload_nbytes(self.shape, self.scheme.kind)
        if len(self.payload) != expected:
            raise FormatError(
                f"payload is {len(self.payload)} bytes, expected {expected} "
                f"for shape {self.shape} ({self.scheme.kind})")


def payload_nbytes(shape: Tuple[int, ...], kind: str) -> int:
    """On-disk payload size; 1-bit rows are padded to whole bytes."""
    if kind == KIND_BIT1:
        width = shape[-1] if shape else 1
        rows = 1
        for dim in shape[:-1]:
            rows *= dim
        return rows * ((width + 7) // 8)
    count = 1
    for dim in shape:
        count *= dim
    return count * (_BITS[kind] // 8)


def calibrate_affine(sample: np.ndarray) -> QuantParams:
    """Affine u8 parameters from a calibration sample.

    The observed range is widened to include zero; the scale is floored
    at 1e-12 so degenerate (constant-zero) samples stay well defined.
    Rounding is half-away-from-zero.
    """
    sample = np.asarray(sample)
    if sample.size == 0:
        raise InputError("calibration sample is empty")
    if not np.all(np.isfinite(sample)):
        raise InputError("calibration sample contains non-finite values")
    lo = min(float(sample.min()), 0.0)
    hi = max(float(sample.max()), 0.0)
    scale = max((hi - lo) / 255.0, SCALE_FLOOR)
    t = -lo / scale
    zero_point = int(min(max(np.trunc(t + np.copysign(0.5, t)), 0.0), 255.0))
    return QuantParams(scale=scale, zero_point=zero_point)


def quantize(x: np.ndarray, scheme: QuantScheme) -> QuantizedFeatures:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise InputError("cannot quantize non-finite values")
    if scheme.kind == KIND_F32:
        payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
    elif scheme.kind == KIND_F16:
        payload = np.ascontiguousarray(x.astype(np.float16),
                                       dtype="<f2").tobytes()
    elif scheme.kind == KIND_U8:
        q = backend.quantize_u8(x, scheme.params.scale,
                                scheme.params.zero_point)
        payload = np.ascontiguousarray(q).tobytes()
    else:  # bit1
        width = x.shape[-1] if x.ndim else 1
        bits = (x >= 0).astype(np.uint8).reshape(-1, width)
        payload = np.packbits(bits, axis=1).tobytes()
    return QuantizedFeatures(scheme=scheme, shape=tuple(x.shape),
                             payload=payload)


def dequantize(q: QuantizedFeatures) -> np.ndarray:
    """Reconstruct a float32 tensor with the original shape."""
    kind = q.scheme.kind
    if kind == KIND_F32:
        arr = np.frombuffer(q.payload, dtype="<f4").astype(np.float32)
    elif kind == KIND_F16:
        arr = np.frombuffer(q.payload, dtype="<f2").astype(np.float32)
    elif kind == KIND_U8:
        codes = np.frombuffer(q.payload, dtype=np.uint8)
        arr = backend.dequantize_u8(codes, q.scheme.params.scale,
                                    q.scheme.params.zero_point)
    else:  # bit1
        width = q.shape[-1] if q.shape else 1
        row_bytes = (width + 7) // 8
        packed = np.frombuffer(q.payload, dtype=np.uint8).reshape(-1, row_bytes)
        bits = np.unpackbits(packed, axis=1)[:, :width]
        arr = (bits.astype(np.float32) * 2.0 - 1.0)
    return arr.reshape(q.shape)


def storage_roundtrip(x: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Apply quantize -> dequantize, simulating features read from storage."""
    if scheme.kind == KIND_F32:
        return np.asarray(x, dtype=np.float32).copy()
    return dequantize(quantize(x, scheme))


def parse_scheme(text: str) -> str:
    """Validate a scheme name from the CLI (params come from calibration)."""
    kind = text.strip().lower()
    if kind not in _BITS:
        raise ParameterError(f"unknown quantization scheme {text!r}")
    return kind


def scheme_for(kind: str, sample: Optional[np.ndarray] = None) -> QuantScheme:
    """Build a scheme, calibrating affine parameters when needed."""
    if kind == KIND_U8:
        if sample is None:
            raise ParameterError("u8 scheme requires a calibration sample")
        return u8_scheme(calibrate_affine(sample))
    return QuantScheme(kind)
