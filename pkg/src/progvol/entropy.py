"""Learned per-level entropy model: a factorized monotone CDF over symbols.

Each level owns an independent univariate CDF built from a short chain of
small monotone maps (matrix with softplus-positive weights, bias, and a
bounded tanh perturbation), squashed by a sigmoid. The probability of an
integer symbol is the CDF difference across its unit bin, which is both the
differentiable rate proxy used during training and, once frozen, the coding
distribution handed to the range coder.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .rangecoder import ALPHABET, CodingTable

PMF_FLOOR = 1e-9


class _MonotoneCDF(nn.Module):
    """Univariate strictly monotone CDF: sigmoid of stacked monotone maps."""

    def __init__(self, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        dims = (1,) + tuple(filters) + (1,)
        # Aim the initial CDF at sigmoid(x / init_scale): per-layer gain is the
        # n-th root of 1/init_scale, divided by fan-in since positive weights add.
        gain = (1.0 / init_scale) ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = float(np.log(np.expm1(gain / dims[i])))
            self.matrices.append(nn.Parameter(torch.full((dims[i + 1], dims[i]), init)))
            # Zero biases/factors keep the chain an odd function, so the
            # initial pmf is symmetric about 0.
            self.biases.append(nn.Parameter(torch.zeros(dims[i + 1], 1)))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(dims[i + 1], 1)))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        v = x.reshape(1, -1)
        for i, m in enumerate(self.matrices):
            v = nn.functional.softplus(m.to(v.dtype)) @ v + self.biases[i].to(v.dtype)
            if i < len(self.factors):
                v = v + torch.tanh(self.factors[i].to(v.dtype)) * torch.tanh(v)
        return v.reshape(x.shape)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


class EntropyModel(nn.Module):
    """One independent monotone CDF per resolution level."""

    def __init__(self, n_levels: int, filters: tuple[int, ...] = (3, 3, 3),
                 init_scale: float = 10.0):
        super().__init__()
        self.n_levels = n_levels
        self.cdfs = nn.ModuleList(_MonotoneCDF(filters, init_scale) for _ in range(n_levels))

    def _cdf(self, level: int) -> _MonotoneCDF:
        if not 1 <= level <= self.n_levels:
            raise ValueError(f"level {level} outside [1, {self.n_levels}]")
        return self.cdfs[level - 1]

    def cdf(self, level: int, x: torch.Tensor) -> torch.Tensor:
        return self._cdf(level)(x)

    def pmf(self, level: int, x: torch.Tensor) -> torch.Tensor:
        """P(symbol) = CDF(x + 1/2) - CDF(x - 1/2), elementwise."""
        c = self._cdf(level)
        return c(x + 0.5) - c(x - 0.5)

    def rate_estimate(self, level: int, noisy_symbols: torch.Tensor) -> torch.Tensor:
        """Estimated total bits to code the tensor: -sum log2 pmf.

        pmf is floored at 1e-9 inside the log to keep gradients bounded.
        """
        if not torch.isfinite(noisy_symbols).all():
            raise ValueError("non-finite symbols")
        p = self.pmf(level, noisy_symbols).clamp_min(PMF_FLOOR)
        return -torch.log2(p).sum()


def build_coding_table(model: EntropyModel, level: int, offset: int = -128) -> CodingTable:
    """Freeze the level's pmf over the 256 symbols starting at `offset`.

    Deterministic: frequencies proportional to the pmf, floored at 1 and
    renormalized to the coder's fixed total.
    """
    with torch.no_grad():
        xs = torch.arange(offset, offset + ALPHABET, dtype=torch.float64)
        p = model.pmf(level, xs).clamp_min(0).cpu().numpy()
    return CodingTable.from_pmf(p, offset=offset)
