"""End-to-end acceptance suite: one test per release criterion.

Run with -v to get one pass/fail line per criterion. The toy-scene criteria
(7, 8, 9 and the six-level half of 6) share a single expensive training run;
expect roughly half an hour of wall time on one CPU core.
"""
import time

import numpy as np
import pytest
import torch

from progvol.container import decode_gof, encode_gof, truncate_stream
from progvol.entropy import EntropyModel, build_coding_table
from progvol.field import (GoF, HierarchicalField, LevelGrid, ResidualSet,
                           make_bbox, sample_feature)
from progvol.metrics import RDPoint, bd_metrics, psnr
from progvol.quant import dequantize, quantize
from progvol.rangecoder import range_decode, range_encode
from progvol.renderer import (DecoderNet, decode_point, intersect_bbox,
                              render_image, render_rays)
from progvol.scenes import default_scene, generate_dataset, orbit_rig
from progvol.streamsim import BandwidthTrace, simulate_session
from progvol.trainer import (TrainConfig, encode_trained_gof, loss_level,
                             schedule_events, train_gof)
from progvol.container import GoFBitstream

torch.set_num_threads(1)

BBOX = make_bbox((-1, -1, -1), (1, 1, 1))


# ---------------------------------------------------------------- toy scene

def _mean_test_psnr(stream, net, ds, level, n_samples=64):
    fields = decode_gof(stream, level)
    vals = []
    with torch.no_grad():
        for f in fields:
            for ci in ds.test_ids:
                img = render_image(f, net, ds.cameras[ci], max_level=level,
                                   n_samples=n_samples)
                vals.append(psnr(img, ds.images[(f.frame_index, ci)]))
    return sum(vals) / len(vals)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """Default synthetic scene trained end to end, plus a high-rate-penalty
    rerun for the rate/quality trade-off check."""
    t0 = time.perf_counter()
    ds = generate_dataset(default_scene(5),
                          orbit_rig(10, width=64, height=64, focal=70.0),
                          tmp_path_factory.mktemp("toyscene"))
    cfg = TrainConfig()                 # L=6, q=20, maxiter=4000, actiter=250
    gof, net, models, logs = train_gof(ds, cfg, bbox=BBOX)
    stream = encode_trained_gof(gof, net, models, cfg)

    cfg_hi = TrainConfig(lambda1=cfg.lambda1 * 10)
    gof_hi, net_hi, models_hi, _ = train_gof(ds, cfg_hi, bbox=BBOX)
    stream_hi = encode_trained_gof(gof_hi, net_hi, models_hi, cfg_hi)

    psnrs = {l: _mean_test_psnr(stream, net, ds, l)
             for l in range(1, cfg.n_levels + 1)}
    psnr_hi = _mean_test_psnr(stream_hi, net_hi, ds, cfg_hi.n_levels)
    minutes = (time.perf_counter() - t0) / 60
    print(f"\n[toy scene] wall time {minutes:.1f} min, per-level PSNR "
          + ", ".join(f"L{l}={p:.2f}" for l, p in psnrs.items())
          + f", 10x-lambda1 PSNR {psnr_hi:.2f}")
    return dict(ds=ds, cfg=cfg, stream=stream, net=net, logs=logs,
                psnrs=psnrs, stream_hi=stream_hi, psnr_hi=psnr_hi,
                minutes=minutes)


# -------------------------------------------------------------- criteria


def test_criterion_01_codec_losslessness():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    for _ in range(1000):
        n_sym = int(rng.integers(2, 257))
        pmf = rng.dirichlet(np.full(n_sym, 0.3))
        from progvol.rangecoder import CodingTable
        table = CodingTable.from_pmf(np.pad(pmf, (0, 256 - n_sym)))
        symbols = rng.integers(0, n_sym, size=int(rng.integers(1, 400))).astype(np.uint8)
        payload = range_encode(symbols, table)
        assert np.array_equal(range_decode(payload, len(symbols), table), symbols)
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, f"1000 round trips took {elapsed:.1f}s"
    print(f"criterion 1 PASS: 1000 lossless round trips in {elapsed:.2f}s")


def test_criterion_02_rate_estimate_soundness():
    torch.manual_seed(2)
    model = EntropyModel(4)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.2)
    rng = np.random.default_rng(2)
    for trial in range(20):
        level = trial % 4 + 1
        table = build_coding_table(model, level)
        p = table.freqs / table.freqs.sum()
        symbols = rng.choice(256, size=10_000 + trial * 500, p=p).astype(np.uint8)
        bits = 8 * len(range_encode(symbols, table))
        h = table.cross_entropy_bits(symbols)
        assert h - 8 <= bits <= 1.02 * h + 512, (trial, h, bits)
    print("criterion 2 PASS: 20 chunks inside [H-8, 1.02H+512] bits")


def test_criterion_03_quantization_bound():
    gen = torch.Generator().manual_seed(3)
    for q in (5.0, 20.0, 40.0):
        span = 127.0 / q
        x = (torch.rand(100, 100, 100, 1, generator=gen,
                        dtype=torch.float64) * 2 - 1) * span
        grid = LevelGrid(1, x, BBOX)
        back = dequantize(quantize(grid, q), dtype=torch.float64).values
        err = (back - x).abs().max().item()
        assert err <= 0.5 / q + 1e-9, (q, err)
    print("criterion 3 PASS: |roundtrip - x| <= 0.5/q on 3e6 values")


def _random_gof(seed, dims, channels=4, n_frames=3):
    gen = torch.Generator().manual_seed(seed)
    key = HierarchicalField(0, [
        LevelGrid(i + 1, torch.randn(*d, channels, generator=gen) * 0.4, BBOX)
        for i, d in enumerate(dims)])
    residuals = [ResidualSet(t, [
        LevelGrid(i + 1, torch.randn(*d, channels, generator=gen) * 0.1, BBOX)
        for i, d in enumerate(dims)]) for t in range(1, n_frames)]
    return GoF(0, key, residuals)


def test_criterion_04_truncation_equivalence():
    dims = ((3, 3, 3), (5, 5, 5), (7, 7, 7))
    for seed in range(10):
        gof = _random_gof(seed, dims)
        torch.manual_seed(seed)
        net = DecoderNet(4, hidden=8, n_freqs=1)
        models = EntropyModel(len(dims))
        stream = encode_gof(gof, net, models, 20.0)
        for l in range(1, len(dims) + 1):
            via_prefix = decode_gof(stream, l)
            short_gof = GoF(0, HierarchicalField(0, gof.keyframe.levels[:l]),
                            [ResidualSet(r.frame_index, r.levels[:l])
                             for r in gof.residuals])
            direct = decode_gof(encode_gof(short_gof, net, models, 20.0))
            for fa, fb in zip(via_prefix, direct):
                for li in range(l):
                    assert torch.equal(fa.levels[li].values, fb.levels[li].values)
    print("criterion 4 PASS: 10 GoFs, every level prefix bit-identical")


def _fd_close(analytic, numeric, rtol=1e-3):
    return abs(analytic - numeric) <= rtol * max(abs(analytic), abs(numeric), 1e-3)


def test_criterion_05_gradient_correctness():
    gen = torch.Generator().manual_seed(5)
    eps = 1e-5

    def fd_on_tensor(params, closure, n_checks, label):
        loss = closure()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [g if g is not None else torch.zeros_like(p)
                 for g, p in zip(grads, params)]
        checked = 0
        flat_idx = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
        order = torch.randperm(len(flat_idx), generator=gen)
        for k in order[:n_checks]:
            pi, j = flat_idx[k]
            with torch.no_grad():
                params[pi].view(-1)[j] += eps
            hi = float(closure().detach())
            with torch.no_grad():
                params[pi].view(-1)[j] -= 2 * eps
            lo = float(closure().detach())
            with torch.no_grad():
                params[pi].view(-1)[j] += eps
            num = (hi - lo) / (2 * eps)
            ana = float(grads[pi].reshape(-1)[j])
            assert _fd_close(ana, num), f"{label}: analytic {ana} vs fd {num}"
            checked += 1
        assert checked >= min(n_checks, len(flat_idx))

    # (a) feature sampling w.r.t. grid values
    vals = [torch.randn(4, 4, 4, 3, generator=gen, dtype=torch.float64,
                        requires_grad=True),
            torch.randn(6, 6, 6, 3, generator=gen, dtype=torch.float64,
                        requires_grad=True)]
    pts = (torch.rand(20, 3, generator=gen, dtype=torch.float64) * 2 - 1) * 0.9
    w = torch.randn(20, 3, generator=gen, dtype=torch.float64)

    def feature_loss():
        field = HierarchicalField(0, [LevelGrid(i + 1, v, BBOX)
                                      for i, v in enumerate(vals)])
        return (sample_feature(field, pts) * w).sum()

    fd_on_tensor(vals, feature_loss, 64, "sample_feature")

    # (b) point decoding w.r.t. decoder weights
    torch.manual_seed(5)
    net = DecoderNet(3, hidden=16, n_freqs=2).double()
    feats = torch.randn(12, 3, generator=gen, dtype=torch.float64)
    dirs = torch.nn.functional.normalize(
        torch.randn(12, 3, generator=gen, dtype=torch.float64), dim=-1)

    def decode_loss():
        rgb, sigma = decode_point(net, feats, dirs)
        return rgb.sum() + 0.3 * sigma.sum()

    fd_on_tensor(list(net.parameters()), decode_loss, 64, "decode_point")

    # (c) rate estimate w.r.t. entropy model parameters
    model = EntropyModel(2).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.3)
    sym = torch.randn(200, generator=gen, dtype=torch.float64) * 12

    def rate_loss():
        return model.rate_estimate(2, sym)

    fd_on_tensor(list(model.parameters()), rate_loss, 64, "rate_estimate")

    # (d) the full training loss: render + rate + magnitude terms
    cam = orbit_rig(1, width=6, height=6, focal=7.0)[0]
    origins, dirs_c = cam.rays(torch.float64)
    t_near, t_far, hit = intersect_bbox(origins, dirs_c, BBOX)
    idx = hit.nonzero(as_tuple=True)[0][:16]
    gt = torch.rand(16, 3, generator=gen, dtype=torch.float64)
    all_params = vals + list(net.parameters()) + list(model.parameters())

    def full_loss():
        field = HierarchicalField(0, [LevelGrid(i + 1, v, BBOX)
                                      for i, v in enumerate(vals)])
        color = render_rays(field, net, origins[idx], dirs_c[idx],
                            t_near[idx], t_far[idx], n_samples=6)
        total, _ = loss_level(2, color, gt, vals[1].reshape(-1), model,
                              q=10.0, alpha=0.7, lambda1=1e-3, lambda2=1e-4)
        return total

    fd_on_tensor(all_params, full_loss, 64, "full_loss")
    print("criterion 5 PASS: finite differences agree within 1e-3 relative")


def test_criterion_06_schedule_fidelity(toy, tmp_path):
    # small configuration: exact arithmetic plus bitwise freeze/inactivity
    cfg2 = TrainConfig(n_levels=2, gof_length=1, maxiter=40, actiter=10,
                       ray_batch=64, n_samples=8, channels=4, hidden=16,
                       n_freqs=2, level_dims=((4, 4, 4), (7, 7, 7)))
    ev = schedule_events(cfg2, is_keyframe=True)
    assert [(e.iteration, e.kind, e.level) for e in ev] == \
        [(10, "activate", 2), (30, "freeze", 1), (30, "zero_lambda", 0)]
    ds = generate_dataset(default_scene(1),
                          orbit_rig(3, width=8, height=8, focal=9.0),
                          tmp_path, n_samples=16)
    _, _, _, logs2 = train_gof(ds, cfg2, bbox=BBOX)

    # large configuration: reuse the toy run's event logs
    cfg6 = toy["cfg"]
    assert (cfg6.n_levels, cfg6.maxiter, cfg6.actiter) == (6, 4000, 250)
    for log, cfg, keyframe in ((logs2[0], cfg2, True),
                               (toy["logs"][0], cfg6, True),
                               (toy["logs"][1], cfg6, False)):
        expect = [(e.iteration, e.kind, e.level)
                  for e in schedule_events(cfg, keyframe)]
        assert [(e.iteration, e.kind, e.level) for e in log.events] == expect
        for l, h in log.freeze_hashes.items():
            assert log.final_hashes[l] == h, f"level {l} moved after freeze"
        for l, h in log.activation_hashes.items():
            assert log.init_hashes[l] == h, f"level {l} moved before activation"
    print("criterion 6 PASS: event logs exact, frozen/inactive levels bitwise")


def test_criterion_07_toy_scene_rd(toy):
    psnrs = toy["psnrs"]
    L = toy["cfg"].n_levels
    assert psnrs[L] >= 28.0, f"full-level PSNR {psnrs[L]:.2f} dB"
    for l in range(1, L):
        assert psnrs[l + 1] >= psnrs[l] - 0.2, \
            f"PSNR drops {psnrs[l]:.2f} -> {psnrs[l + 1]:.2f} at level {l + 1}"
    for frame_sizes in toy["stream"].chunk_sizes():
        cum = np.cumsum(frame_sizes)
        assert np.all(np.diff(cum) > 0)
    full_bytes = len(toy["stream"].to_bytes())
    hi_bytes = len(toy["stream_hi"].to_bytes())
    assert hi_bytes < full_bytes, "10x rate penalty did not shrink the stream"
    assert psnrs[L] - toy["psnr_hi"] <= 1.0, \
        f"10x rate penalty costs {psnrs[L] - toy['psnr_hi']:.2f} dB"
    print(f"criterion 7 PASS: {psnrs[L]:.2f} dB full-level, "
          f"{full_bytes} -> {hi_bytes} bytes at 10x lambda1 "
          f"({toy['psnr_hi']:.2f} dB), wall time {toy['minutes']:.1f} min "
          f"(target < 30 min)")


def test_criterion_08_single_stream_operating_points(toy):
    stream, net, ds = toy["stream"], toy["net"], toy["ds"]
    points = []
    for l in range(1, stream.n_levels + 1):
        short = truncate_stream(stream, l)
        points.append((len(short.to_bytes()), toy["psnrs"][l]))
    assert len(points) >= 3
    for (b0, p0), (b1, p1) in zip(points, points[1:]):
        assert b1 > b0
        assert p1 >= p0 - 0.2
    print("criterion 8 PASS: "
          + "; ".join(f"{b} B / {p:.2f} dB" for b, p in points))


def test_criterion_09_streaming_soundness(toy):
    stream = toy["stream"]
    sizes = stream.chunk_sizes()
    low = sum(sizes[0][:2]) / 0.5 * 1.1
    trace = BandwidthTrace([(0.0, low), (1.2, low * 30)])
    report = simulate_session(stream, trace, 0.5)
    assert report.total_bytes + report.carryover == pytest.approx(
        report.budget_bytes, rel=1e-12)
    fetched = set()
    for rec in report.frames:
        fetched.update(rec.fetched)
    reference = decode_gof(stream)
    decoded = 0
    for rec in report.frames:
        if rec.level == 0:
            continue
        sub = GoFBitstream(
            gof_index=stream.gof_index, start_frame=stream.start_frame,
            n_levels=stream.n_levels, stored_max_level=rec.level,
            channels=stream.channels, bbox=stream.bbox, dims=list(stream.dims),
            q_per_level=list(stream.q_per_level), tables=stream.tables[:rec.level],
            decoder_hidden=stream.decoder_hidden,
            decoder_n_freqs=stream.decoder_n_freqs,
            decoder_weights=stream.decoder_weights,
            frames=[[c for c in stream.frames[g] if (g, c.level) in fetched
                     and c.level <= rec.level] for g in range(rec.frame + 1)])
        got = decode_gof(sub, rec.level)[rec.frame]
        for li in range(rec.level):
            assert torch.equal(got.levels[li].values,
                               reference[rec.frame].levels[li].values)
        decoded += 1
    assert decoded > 0
    print(f"criterion 9 PASS: {decoded} delivered frames decode from their "
          f"byte subsets; conservation exact "
          f"({report.total_bytes:.0f} + {report.carryover:.0f} "
          f"= {report.budget_bytes:.0f})")


def test_criterion_10_bd_utility():
    rates = [100.0, 200.0, 400.0, 800.0]
    qual = [30.0, 32.0, 33.5, 34.5]
    a = [RDPoint(r, p) for r, p in zip(rates, qual)]
    d0, bdbr0 = bd_metrics(a, a)
    assert abs(d0) < 1e-9 and abs(bdbr0) < 1e-9
    b = [RDPoint(r, p + 1.0) for r, p in zip(rates, qual)]
    d1, _ = bd_metrics(a, b)
    assert abs(d1 - 1.0) <= 0.01
    print(f"criterion 10 PASS: identical -> (0, 0); shifted -> {d1:+.3f} dB")
