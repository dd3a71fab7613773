"""Simulate delivering a layered clip over a fluctuating connection.

A client plays frames at a fixed cadence while a piecewise-constant
bandwidth trace limits how many bytes arrive per interval. Each frame the
client buys the deepest level prefix it can afford -- including any
higher-level chunks of earlier frames it skipped, since residuals chain
backwards -- so everything it displays is genuinely decodable from the bytes
received. Watch the delivered level track the bandwidth steps.

Run demo 02 first (this reuses its stream), then:
    python3 demos/04_streaming.py
"""
from pathlib import Path

from progvol import BandwidthTrace, GoFBitstream, simulate_session

OUT = Path(__file__).parent / "out" / "02"
if not (OUT / "clip.hpvc").exists():
    raise SystemExit("run demos/02_train_and_encode.py first")

stream = GoFBitstream.load(OUT / "clip.hpvc")
sizes = stream.chunk_sizes()
full = sum(map(sum, sizes)) / (stream.n_frames * 0.5)   # B/s for everything
print(f"clip: {stream.n_frames} frames, {stream.stored_max_level} levels, "
      f"{sum(map(sum, sizes))} bytes total "
      f"(~{full / 1000:.0f} kB/s sustains full quality at 2 fps)")

scenarios = {
    "generous": BandwidthTrace([(0.0, full * 2)]),
    "tight, then recovering": BandwidthTrace([(0.0, full * 0.15),
                                              (0.75, full * 2)]),
    "starved": BandwidthTrace([(0.0, full * 0.01)]),
}

for name, trace in scenarios.items():
    report = simulate_session(stream, trace, frame_interval=0.5)
    print(f"\nscenario: {name}")
    for rec in report.frames:
        bar = "#" * rec.level + "." * (stream.stored_max_level - rec.level)
        note = " (stalled: nothing affordable)" if rec.stall else ""
        print(f"  t={rec.frame * 0.5:4.1f}s frame {rec.frame} "
              f"level [{bar}] {rec.bytes_sent:7.0f} B{note}")
    print(f"  delivered {report.total_bytes:.0f} of {report.budget_bytes:.0f} "
          f"budget bytes, total stall {report.total_stall:.1f}s")
