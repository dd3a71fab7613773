"""Deterministic bandwidth-constrained delivery of a layered stream.

The client walks frames at a fixed cadence. Each interval it receives the
byte budget the trace allows (plus anything unspent earlier) and picks the
highest level it can afford. Raising the level also buys the missing
higher-level chunks of all earlier frames (residual reconstruction is
recursive), so every delivered (frame, level) pair is decodable from the
bytes actually sent. Transport is modeled as an aggregate byte budget only;
there is no packet loss or protocol detail.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .container import GoFBitstream


@dataclass
class BandwidthTrace:
    """Piecewise-constant bandwidth: (timestamp seconds, bytes per second)."""

    steps: list[tuple[float, float]]

    def __post_init__(self):
        ts = [t for t, _ in self.steps]
        if not self.steps:
            raise ValueError("empty trace")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must be strictly increasing")
        if any(r < 0 for _, r in self.steps):
            raise ValueError("rates must be nonnegative")

    @classmethod
    def parse(cls, text: str) -> "BandwidthTrace":
        steps = []
        for ln in text.splitlines():
            ln = ln.split("#")[0].strip()
            if ln:
                t, r = ln.split()
                steps.append((float(t), float(r)))
        return cls(steps)

    @classmethod
    def load(cls, path) -> "BandwidthTrace":
        return cls.parse(Path(path).read_text())

    def bytes_between(self, t0: float, t1: float) -> float:
        """Integral of the rate over [t0, t1); zero before the first step."""
        total = 0.0
        for i, (t, r) in enumerate(self.steps):
            t_end = self.steps[i + 1][0] if i + 1 < len(self.steps) else float("inf")
            lo, hi = max(t0, t), min(t1, t_end)
            if hi > lo:
                total += r * (hi - lo)
        return total


@dataclass
class FrameDelivery:
    frame: int
    level: int                  # 0 = frame skipped
    bytes_sent: float
    stall: float
    fetched: list[tuple[int, int]] = field(default_factory=list)  # (frame, level) chunks


@dataclass
class SessionReport:
    frames: list[FrameDelivery]
    total_bytes: float
    budget_bytes: float
    carryover: float

    @property
    def levels(self) -> list[int]:
        return [f.level for f in self.frames]

    @property
    def total_stall(self) -> float:
        return sum(f.stall for f in self.frames)


def select_level(cumulative_sizes: list[float], budget: float) -> int:
    """Largest level whose cumulative cost fits the budget; 0 if none does."""
    if any(b < a for a, b in zip(cumulative_sizes, cumulative_sizes[1:])):
        raise ValueError("sizes must be ascending cumulative")
    level = 0
    for l, c in enumerate(cumulative_sizes, start=1):
        if c <= budget:
            level = l
    return level


def simulate_session(stream: GoFBitstream, trace: BandwidthTrace,
                     frame_interval: float) -> SessionReport:
    sizes = stream.chunk_sizes()            # per frame, per stored level
    L = stream.stored_max_level
    have = []                               # highest level fetched per past frame
    records = []
    carry = 0.0
    budget_total = 0.0
    for f in range(stream.n_frames):
        fresh = trace.bytes_between(f * frame_interval, (f + 1) * frame_interval)
        budget_total += fresh
        budget = carry + fresh
        cum = []
        run = 0.0
        for l in range(1, L + 1):
            run += sizes[f][l - 1]
            backfill = sum(sizes[g][j] for g, hg in enumerate(have)
                           for j in range(hg, l))
            cum.append(run + backfill)
        level = select_level(cum, budget)
        fetched = []
        if level > 0:
            spent = cum[level - 1]
            for g, hg in enumerate(have):
                if hg < level:
                    fetched.extend((g, j + 1) for j in range(hg, level))
                    have[g] = level
            fetched.extend((f, j) for j in range(1, level + 1))
            carry = budget - spent
            stall = 0.0
        else:
            spent = 0.0
            carry = budget
            stall = frame_interval
        have.append(level)
        records.append(FrameDelivery(f, level, spent, stall, fetched))
    total = sum(r.bytes_sent for r in records)
    return SessionReport(records, total, budget_total, carry)
