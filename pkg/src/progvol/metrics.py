"""Quality and rate-distortion measurement.

PSNR/SSIM are computed on [0,1] float images (before any 8-bit rounding).
Rate-distortion curves are summarized with the standard Bjontegaard deltas:
cubic fits in the log-rate domain, integrated over the overlapping range.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0


@dataclass
class RDPoint:
    bits: float
    psnr: float
    tag: str = ""

    def __post_init__(self):
        if self.bits <= 0:
            raise ValueError("bits must be positive")
        if not np.isfinite(self.psnr):
            raise ValueError("PSNR must be finite (cap identical images at 99 dB)")


def _to_np(img) -> np.ndarray:
    a = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    return a.astype(np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images; 99 dB when identical."""
    x, y = _to_np(a), _to_np(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a, b, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-windowed (11x11, sigma 1.5) SSIM, averaged over channels."""
    x, y = _to_np(a), _to_np(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    c1, c2 = k1 ** 2, k2 ** 2
    truncate = 3.5                      # radius 5 -> 11-tap window
    pad = int(truncate * sigma + 0.5)
    vals = []
    for ch in range(x.shape[2]):
        im1, im2 = x[..., ch], y[..., ch]
        f = lambda z: gaussian_filter(z, sigma, truncate=truncate, mode="nearest")
        ux, uy = f(im1), f(im2)
        vx = f(im1 * im1) - ux * ux
        vy = f(im2 * im2) - uy * uy
        vxy = f(im1 * im2) - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
        # exclude window-truncated borders; keep at least the center row/column
        # so images smaller than the window still produce a value
        py = min(pad, (s.shape[0] - 1) // 2)
        px = min(pad, (s.shape[1] - 1) // 2)
        vals.append(s[py:s.shape[0] - py, px:s.shape[1] - px].mean())
    return float(np.mean(vals))


def _curve(points) -> tuple[np.ndarray, np.ndarray]:
    rates = np.array([p.bits for p in points], dtype=np.float64)
    psnrs = np.array([p.psnr for p in points], dtype=np.float64)
    order = np.argsort(rates)
    rates, psnrs = rates[order], psnrs[order]
    if len(rates) < 4:
        raise ValueError("need at least 4 rate-distortion points")
    if np.any(np.diff(rates) <= 0):
        raise ValueError("rates must be strictly monotone")
    return np.log10(rates), psnrs


def _poly_avg(x: np.ndarray, y: np.ndarray, lo: float, hi: float) -> float:
    p = np.polyfit(x, y, 3)
    ip = np.polyint(p)
    return (np.polyval(ip, hi) - np.polyval(ip, lo)) / (hi - lo)


def bd_metrics(curve_a, curve_b) -> tuple[float, float]:
    """Bjontegaard deltas of curve_b relative to curve_a.

    Returns (BD-PSNR in dB: positive means b is better at equal rate,
    BDBR in percent: negative means b needs fewer bits at equal quality).
    """
    la, pa = _curve(curve_a)
    lb, pb = _curve(curve_b)
    lo, hi = max(la.min(), lb.min()), min(la.max(), lb.max())
    if hi <= lo:
        raise ValueError("rate ranges do not overlap")
    bd_psnr = _poly_avg(lb, pb, lo, hi) - _poly_avg(la, pa, lo, hi)
    plo, phi = max(pa.min(), pb.min()), min(pa.max(), pb.max())
    if phi <= plo:
        raise ValueError("PSNR ranges do not overlap")
    avg_log_diff = _poly_avg(pb, lb, plo, phi) - _poly_avg(pa, la, plo, phi)
    bdbr = (10.0 ** avg_log_diff - 1.0) * 100.0
    return float(bd_psnr), float(bdbr)


def write_rd_csv(path, rows: list[dict]):
    """Level/bytes/quality table in CSV form, for external plotting."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
