"""Uniform per-tensor fake quantization with a straight-through gradient.

Weights use a signed symmetric grid ``k * s / M`` with ``M = 2**(bits-1) - 1``
and ``s = max|x|``. Activations (post-ReLU) use an unsigned grid on
``[0, s]`` with ``M = 2**bits - 1`` and ``s = max(x)``. An all-zero input
gets ``s = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, elementwise
from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    signed: bool = True
    scale_mode: str = "per-tensor-absmax"

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 2:
            raise ContractError(f"bits must be an integer >= 2, got {self.bits!r}")
        if self.scale_mode != "per-tensor-absmax":
            raise ContractError(f"unsupported scale_mode {self.scale_mode!r}")

    @property
    def levels(self) -> int:
        return 2 ** self.bits

    @property
    def max_code(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2 ** self.bits - 1


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def tensor_scale(x, spec: QuantSpec) -> float:
    v = _values(x)
    if v.size == 0:
        return 1.0
    s = float(np.abs(v).max()) if spec.signed else max(float(v.max()), 0.0)
    return s if s > 0 else 1.0


def quantize(x, spec: QuantSpec, scale: float | None = None) -> np.ndarray:
    """Fake-quantized copy of ``x`` (array or Tensor values).

    ``scale`` overrides the absmax clamp bound.
    """
    v = _values(x)
    s = tensor_scale(v, spec) if scale is None else float(scale)
    if not s > 0:
        raise ContractError(f"quantization scale must be positive, got {s}")
    m = spec.max_code
    lo = -s if spec.signed else 0.0
    codes = _round_half_away(np.clip(v, lo, s) / s * m)
    # (k / M) * s keeps the outermost grid point exactly at s: idempotence
    return (codes / m) * s


def ste_backward(upstream, x, spec: QuantSpec, scale: float | None = None) -> np.ndarray:
    """Straight-through gradient: identity inside the clamp range, 0 outside."""
    g = _values(upstream)
    v = _values(x)
    if g.shape != v.shape:
        raise ShapeError(f"ste_backward: upstream {g.shape} vs input {v.shape}")
    s = tensor_scale(v, spec) if scale is None else float(scale)
    lo = -s if spec.signed else 0.0
    inside = (v >= lo) & (v <= s)
    return np.where(inside, g, 0.0)


def quant_error(x, spec: QuantSpec) -> float:
    v = _values(x)
    if v.size == 0:
        return 0.0
    return float(np.mean((v - quantize(v, spec)) ** 2))


def fake_quant(x: Tensor, spec: QuantSpec, scale: float | None = None) -> Tensor:
    """Autodiff op: quantize forward, straight-through backward.

    The scale is a constant for the backward pass.
    """
    s = tensor_scale(x, spec) if scale is None else float(scale)
    return elementwise(f"fake_quant{spec.bits}", x,
                       lambda v: quantize(v, spec, s),
                       lambda v, g: ste_backward(g, v, spec, s))
