"""IEEE binary16 emulation for half-precision communication.

Conversion uses numpy's float32 -> float16 cast (round to nearest, ties to
even, subnormals kept).  Finite overflow is turned into saturation by
clipping to the largest finite half first; NaN passes through unchanged.
"""

from __future__ import annotations

import numpy as np

HALF_MAX = 65504.0


def quantize_fp16(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float32)
    return np.clip(x, -HALF_MAX, HALF_MAX).astype(np.float16)


def dequantize_fp16(halves) -> np.ndarray:
    return np.asarray(halves, dtype=np.float16).astype(np.float32)


def round_trip(values) -> np.ndarray:
    """float32 values rounded to the nearest half, back in float32."""
    return dequantize_fp16(quantize_fp16(values))
