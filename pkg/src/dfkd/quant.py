"""DoReFa-style fixed-point fake quantization with straight-through gradients.

Weights are kept as full-precision shadow parameters and quantized at
forward time; the rounding step passes its gradient through unchanged, the
tanh normalization around it stays differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["QuantConfig", "quantize_unit", "quantize_weights", "quantize_activations"]


@dataclass(frozen=True)
class QuantConfig:
    n_bits: int
    quantize_first_layer: bool = False
    quantize_last_layer: bool = False

    def __post_init__(self):
        if not 2 <= self.n_bits <= 8:
            raise ValueError(f"n_bits must be in [2, 8], got {self.n_bits}")


def _round_half_away(v: np.ndarray) -> np.ndarray:
    # inputs here are always >= 0, so half-away-from-zero is floor(v + 0.5)
    return np.floor(v + 0.5)


def quantize_unit(r: Tensor, n_bits: int) -> Tensor:
    """Snap values in [0,1] onto the grid {k/(2^n-1)}; gradient is identity."""
    lo, hi = r.data.min(), r.data.max()
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise ValueError(f"quantize_unit input outside [0,1]: range [{lo:.6g}, {hi:.6g}]")
    levels = float(2**n_bits - 1)
    data = np.clip(r.data, 0.0, 1.0)
    out = (_round_half_away(levels * data) / levels).astype(r.dtype)

    def bwd(g):
        return (g,)

    return T._from_op(out, (r,), bwd, "quantize_unit")


def quantize_weights(w: Tensor, n_bits: int) -> Tensor:
    """DoReFa weight quantizer: 2*Q(tanh(w)/(2*max|tanh(w)|) + 1/2) - 1.

    The max-normalizer is treated as a constant; an all-zero tensor maps to
    an all-zero tensor (degenerate case, no error).
    """
    t = T.tanh(w)
    m = float(np.abs(t.data).max())
    if m == 0.0:
        return T.scalar_multiply(w, 0.0)
    arg = T.scalar_multiply(t, 1.0 / (2.0 * m)) + 0.5
    q = quantize_unit(arg, n_bits)
    return T.scalar_multiply(q, 2.0) - 1.0


def quantize_activations(a: Tensor, n_bits: int) -> Tensor:
    """Clamp to [0,1] then snap to the grid; gradient passes inside the clamp."""
    return quantize_unit(T.clamp(a, 0.0, 1.0), n_bits)
