"""Scalar quantization of residual grids to 8-bit symbols.

Values are scaled by q, rounded half-away-from-zero and shifted by the rounded
minimum so every symbol is a uint8. Dequantization inverts the shift and scale
exactly; the residual error is bounded by 0.5/q per element. During training
rounding is replaced by uniform noise so gradients pass through unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .field import LevelGrid


class QuantRangeError(ValueError):
    """Scaled dynamic range exceeds the 8-bit alphabet."""


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer, ties away from zero (not banker's rounding)."""
    return torch.where(x >= 0, torch.floor(x + 0.5), torch.ceil(x - 0.5))


@dataclass
class QuantizedLevel:
    """8-bit symbols plus the metadata needed to invert them."""

    symbols: torch.Tensor        # uint8, shape (nx, ny, nz, C)
    q: float
    min_q: int                   # rounded q*min of the source values
    level: int
    bbox: torch.Tensor

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.symbols.shape[:3])

    @property
    def channels(self) -> int:
        return self.symbols.shape[3]


def quantize(residual_level: LevelGrid, q: float, min_q: int | None = None) -> QuantizedLevel:
    """Quantize one level's values to uint8 symbols.

    symbols = round(q*x) - min_q with min_q = round(q*min(x)) unless an
    explicit (smaller or equal) min_q is supplied, e.g. a shared per-GoF shift.
    """
    if q <= 0:
        raise ValueError(f"q must be positive, got {q}")
    x = residual_level.values
    if not torch.isfinite(x).all():
        raise ValueError(f"level {residual_level.level}: non-finite values")
    scaled = round_half_away(q * x.double())
    lo = int(round_half_away(q * x.double().min()).item())
    if min_q is None:
        min_q = lo
    elif min_q > lo:
        raise QuantRangeError(f"level {residual_level.level}: min_q {min_q} above data minimum {lo}")
    span = int(scaled.max().item()) - min_q
    if span > 255:
        vrange = (x.max() - x.min()).item()
        q_ceiling = 255.0 / vrange if vrange > 0 else float("inf")
        raise QuantRangeError(
            f"level {residual_level.level}: quantized span {span} > 255 at q={q}; "
            f"largest usable q is about {q_ceiling:.4g}")
    symbols = (scaled - min_q).to(torch.uint8)
    return QuantizedLevel(symbols=symbols, q=float(q), min_q=int(min_q),
                          level=residual_level.level, bbox=residual_level.bbox)


def dequantize(ql: QuantizedLevel, dtype=torch.float32) -> LevelGrid:
    """Invert quantize: values = (symbols + min_q) / q."""
    values = ((ql.symbols.to(torch.float64) + ql.min_q) / ql.q).to(dtype)
    return LevelGrid(ql.level, values, ql.bbox)


def simulate_quantize(values: torch.Tensor, q: float,
                      generator: torch.Generator | None = None) -> torch.Tensor:
    """Training-time stand-in for quantization: add Uniform(-1/2, 1/2)/q noise.

    The noise lives in the symbol domain (where rounding happens) and is scaled
    back by 1/q. Gradients pass through with an identity Jacobian.
    """
    if q <= 0:
        raise ValueError(f"q must be positive, got {q}")
    u = torch.rand(values.shape, generator=generator, dtype=values.dtype,
                   device=values.device) - 0.5
    return values + u / q
