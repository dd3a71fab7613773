"""Lossless range coder over a fixed 256-symbol frequency table.

A 32-bit carry-less range coder (Subbotin style): renormalization emits the
top byte whenever it is settled, and when the interval straddles a byte
boundary while being narrower than 2^16 the range is clipped to the boundary
instead of propagating carries. Payload layout: big-endian renormalization
bytes followed by a fixed 4-byte flush of the final low value. Frequency
totals must not exceed 2^16 so the interval never collapses to zero.
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

TOP = 1 << 24
BOT = 1 << 16
MASK = (1 << 32) - 1
TABLE_TOTAL = 1 << 16
ALPHABET = 256
FLUSH_BYTES = 4


class DecodeError(ValueError):
    """Payload ended before all requested symbols were decoded."""


@dataclass
class CodingTable:
    """Integer frequencies for symbols 0..255, summing exactly to 2^16.

    `offset` records which entropy-model integer symbol 0 corresponds to, so
    tables built from a model can be reattached to shifted chunk symbols.
    """

    freqs: np.ndarray
    offset: int = 0

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=np.int64)
        if self.freqs.shape != (ALPHABET,):
            raise ValueError(f"need {ALPHABET} frequencies, got {self.freqs.shape}")
        if self.freqs.min() < 1:
            raise ValueError("every frequency must be >= 1")
        if int(self.freqs.sum()) != TABLE_TOTAL:
            raise ValueError(f"frequencies must sum to {TABLE_TOTAL}, got {int(self.freqs.sum())}")
        self.cum = np.zeros(ALPHABET + 1, dtype=np.int64)
        np.cumsum(self.freqs, out=self.cum[1:])

    @classmethod
    def from_pmf(cls, pmf: np.ndarray, offset: int = 0) -> "CodingTable":
        """Quantize a probability vector to integer frequencies.

        Frequencies are proportional to the pmf, floored at 1 (so every symbol
        stays codable) and adjusted by largest remainder to hit the exact total.
        """
        p = np.asarray(pmf, dtype=np.float64)
        if p.shape != (ALPHABET,):
            raise ValueError(f"need {ALPHABET} probabilities")
        p = np.clip(p, 0.0, None)
        s = p.sum()
        p = np.full(ALPHABET, 1.0 / ALPHABET) if s <= 0 else p / s
        raw = p * TABLE_TOTAL
        f = np.maximum(1, np.round(raw).astype(np.int64))
        diff = TABLE_TOTAL - int(f.sum())
        if diff != 0:
            # Largest remainder first when adding; smallest when removing,
            # never dropping a frequency below 1.
            order = np.argsort(raw - f)
            step = 1 if diff > 0 else -1
            picks = order[::-1] if diff > 0 else order
            i = 0
            while diff != 0:
                j = picks[i % ALPHABET]
                if step > 0 or f[j] > 1:
                    f[j] += step
                    diff -= step
                i += 1
        return cls(f, offset)

    def cross_entropy_bits(self, symbols: np.ndarray) -> float:
        """Bits the coder would ideally need: sum of -log2(freq/total)."""
        s = np.asarray(symbols, dtype=np.int64)
        return float(np.sum(-np.log2(self.freqs[s] / TABLE_TOTAL))) if s.size else 0.0


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.rng = MASK
        self.out = bytearray()

    def encode(self, cum_lo: int, freq: int, total: int):
        r = self.rng // total
        self.low += r * cum_lo
        self.rng = r * freq
        low, rng, out = self.low, self.rng, self.out
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & MASK
            rng = rng << 8
        self.low, self.rng = low, rng

    def finish(self) -> bytes:
        low = self.low
        for _ in range(FLUSH_BYTES):
            self.out.append((low >> 24) & 0xFF)
            low = (low << 8) & MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, payload: bytes):
        if len(payload) < FLUSH_BYTES:
            raise DecodeError(f"payload of {len(payload)} bytes is shorter than the flush")
        self.data = payload
        self.pos = FLUSH_BYTES
        self.low = 0
        self.rng = MASK
        self.code = int.from_bytes(payload[:FLUSH_BYTES], "big")

    def decode(self, cum: list[int], total: int) -> int:
        r = self.rng // total
        target = ((self.code - self.low) & MASK) // r
        if target >= total:
            target = total - 1
        sym = bisect_right(cum, target) - 1
        self.low += r * cum[sym]
        self.rng = r * (cum[sym + 1] - cum[sym])
        low, rng, code = self.low, self.rng, self.code
        data, pos = self.data, self.pos
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            if pos >= len(data):
                raise DecodeError("truncated payload")
            code = ((code << 8) | data[pos]) & MASK
            pos += 1
            low = (low << 8) & MASK
            rng = rng << 8
        self.low, self.rng, self.code, self.pos = low, rng, code, pos
        return sym


def range_encode(symbols: np.ndarray, table: CodingTable) -> bytes:
    """Encode uint8 symbols under the table; empty input yields just the flush."""
    s = np.asarray(symbols).reshape(-1)
    if s.size and (s.min() < 0 or s.max() >= ALPHABET):
        raise ValueError("symbols outside the 8-bit alphabet")
    cum = table.cum.tolist()
    enc = RangeEncoder()
    encode = enc.encode
    for v in s.tolist():
        encode(cum[v], cum[v + 1] - cum[v], TABLE_TOTAL)
    return enc.finish()


def range_decode(payload: bytes, count: int, table: CodingTable) -> np.ndarray:
    """Invert range_encode; requires the identical table and symbol count."""
    dec = RangeDecoder(payload)
    cum = table.cum.tolist()
    decode = dec.decode
    out = np.empty(count, dtype=np.uint8)
    for i in range(count):
        out[i] = decode(cum, TABLE_TOTAL)
    return out
