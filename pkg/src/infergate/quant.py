"""Per-tensor affine int8 quantization of fp32 weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

QMIN, QMAX = -128, 127
LEVELS = QMAX - QMIN  # 255
# bytes stored per quantized tensor besides the codes: f32 scale + i8 zero point
PARAMS_OVERHEAD = 5


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero_point {self.zero_point} outside int8")


@dataclass(frozen=True)
class QuantizedTensor:
    data: np.ndarray  # int8, original shape
    params: QuantParams

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return self.data.size + PARAMS_OVERHEAD


def _f32_at_least(x: float) -> float:
    """Smallest float32 >= x, so a float32 scale never shrinks the range."""
    f = np.float32(x)
    if float(f) < x:
        f = np.nextafter(f, np.float32(np.inf))
    return float(f)


def calibrate(values) -> QuantParams:
    """Min/max calibration.

    The calibrated range is widened to contain 0 so the zero point is always
    a valid int8 and no value in the tensor saturates. A constant tensor gets
    scale 1 whenever the constant is representable that way.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise CalibrationError("cannot calibrate an empty tensor")
    if not np.all(np.isfinite(x)):
        raise CalibrationError("tensor contains NaN or Inf")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi and -LEVELS <= lo <= LEVELS:
        zp = int(np.clip(np.round(QMIN - lo), QMIN, QMAX))
        return QuantParams(1.0, zp)
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = _f32_at_least((hi - lo) / LEVELS)
    zp = int(np.clip(np.round(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale, zp)


def quantize_tensor(t, params: QuantParams) -> QuantizedTensor:
    x = np.asarray(t, dtype=np.float64)
    q = np.round(x / params.scale) + params.zero_point
    return QuantizedTensor(np.clip(q, QMIN, QMAX).astype(np.int8), params)


def dequantize_tensor(q: QuantizedTensor) -> np.ndarray:
    return (q.data.astype(np.int32) - q.params.zero_point) * np.float64(q.params.scale)


def quantize(t) -> QuantizedTensor:
    """Calibrate on ``t`` and quantize it."""
    return quantize_tensor(t, calibrate(t))


@dataclass(frozen=True)
class ModelSizeReport:
    fp32_bytes: int
    quantized_bytes: int

    @property
    def ratio(self) -> float:
        return self.fp32_bytes / self.quantized_bytes


def tensor_bytes(n_params: int, quantized: bool) -> int:
    return n_params + PARAMS_OVERHEAD if quantized else 4 * n_params


def size_report(tensor_sizes: Sequence[Sequence[int]], mask: Sequence[bool]) -> ModelSizeReport:
    """Byte counts for layers given as lists of per-tensor parameter counts."""
    if len(tensor_sizes) != len(mask):
        raise ValueError("mask length does not match layer count")
    fp32 = sum(4 * n for sizes in tensor_sizes for n in sizes)
    qbytes = sum(tensor_bytes(n, m) for sizes, m in zip(tensor_sizes, mask) for n in sizes)
    return ModelSizeReport(fp32, qbytes)


def model_size_report(stack, quantize_mask: Sequence[bool] | None = None) -> ModelSizeReport:
    """Size of ``stack`` (a LayerStack) with the masked parametric layers quantized.

    ``quantize_mask`` has one entry per parametric layer; None means all.
    """
    sizes = stack.tensor_sizes()
    if quantize_mask is None:
        quantize_mask = [True] * len(sizes)
    return size_report(sizes, quantize_mask)


def fraction_for_ratio(ratio: float) -> float:
    """Fraction of parameters to quantize for a target fp32/quantized ratio.

    Ignores per-tensor overhead: solves 4 / (q + 4 (1 - q)) = ratio.
    """
    if not 1.0 <= ratio <= 4.0:
        raise ValueError("achievable ratios lie in [1, 4]")
    return (4.0 - 4.0 / ratio) / 3.0


def mask_for_ratio(tensor_sizes: Sequence[Sequence[int]], ratio: float) -> list[bool]:
    """Layer mask whose size ratio is as close to ``ratio`` as layer granularity allows.

    Exact subset-sum over per-layer byte savings, with a Python int as bitset.
    """
    fraction_for_ratio(ratio)  # range check
    fp32 = sum(4 * n for sizes in tensor_sizes for n in sizes)
    savings = [sum(4 * n - tensor_bytes(n, True) for n in sizes) for sizes in tensor_sizes]
    target = round(fp32 - fp32 / ratio)
    if any(s < 0 for s in savings):
        raise ValueError("a layer grows when quantized; mask it out before solving")
    reach = [1]
    for s in savings:
        reach.append(reach[-1] | (reach[-1] << s))
    bits = reach[-1]
    best = None
    for delta in range(0, bits.bit_length() + target + 1):
        for cand in (target - delta, target + delta):
            if cand >= 0 and (bits >> cand) & 1:
                best = cand
                break
        if best is not None:
            break
    mask = [False] * len(savings)
    rest = best
    for i in range(len(savings) - 1, -1, -1):
        if not (reach[i] >> rest) & 1:
            mask[i] = True
            rest -= savings[i]
    assert rest == 0
    return mask
