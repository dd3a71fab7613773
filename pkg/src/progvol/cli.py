"""Command-line front end: dataset generation, training, codec and streaming.

Every subcommand is a thin wrapper over the library; anything it can do is
also available (with more control) through the Python API.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import torch
import yaml

from .container import GoFBitstream, decode_gof, decoder_from_stream, truncate_stream
from .entropy import EntropyModel
from .field import make_bbox
from .metrics import psnr, ssim, write_rd_csv
from .renderer import DecoderNet, render_image
from .scenes import default_scene, generate_dataset, load_dataset, orbit_rig, write_png
from .streamsim import BandwidthTrace, simulate_session
from .trainer import TrainConfig, encode_trained_gof, train_gof


def _load_config(path) -> TrainConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - names
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    if "level_dims" in raw and raw["level_dims"] is not None:
        raw["level_dims"] = [tuple(d) for d in raw["level_dims"]]
    return TrainConfig(**raw)


def cmd_scene_gen(args):
    spec = default_scene(args.frames)
    cams = orbit_rig(args.cameras, width=args.size, height=args.size,
                     focal=args.size * 70 / 64)
    generate_dataset(spec, cams, args.out, n_samples=args.samples)
    print(f"wrote {args.frames} frames x {args.cameras} cameras to {args.out}")


def cmd_train(args):
    torch.manual_seed(0)
    ds = load_dataset(args.dataset)
    cfg = _load_config(args.config) if args.config else TrainConfig()
    if args.maxiter:
        cfg.maxiter = args.maxiter
    bbox = make_bbox(args.bbox[:3], args.bbox[3:])
    rows: list = []
    gof, net, models, logs = train_gof(ds, cfg, bbox=bbox, log_rows=rows)
    stream = encode_trained_gof(gof, net, models, cfg)
    stream.save(args.out)
    print(f"wrote {args.out} ({len(stream.to_bytes())} bytes, "
          f"{stream.n_frames} frames, {stream.n_levels} levels)")
    if args.metrics:
        with open(args.metrics, "w", newline="") as f:
            w = csv.DictWriter(f, sorted({k for r in rows for k in r}))
            w.writeheader()
            w.writerows(rows)
    if args.checkpoint:
        torch.save({
            "config": dataclasses.asdict(cfg),
            "decoder": net.state_dict(),
            "entropy": models.state_dict(),
            "keyframe": [lv.values for lv in gof.keyframe.levels],
            "residuals": [[lv.values for lv in r.levels] for r in gof.residuals],
            "start_frame": gof.start_frame,
            "bbox": gof.keyframe.bbox,
        }, args.checkpoint)


def cmd_encode(args):
    from .field import GoF, HierarchicalField, LevelGrid, ResidualSet
    ck = torch.load(args.checkpoint, weights_only=True)
    cfg = TrainConfig(**ck["config"])
    if cfg.level_dims is not None:
        cfg.level_dims = [tuple(d) for d in cfg.level_dims]
    net = DecoderNet(cfg.channels, cfg.hidden, cfg.n_freqs)
    net.load_state_dict(ck["decoder"])
    models = EntropyModel(cfg.n_levels)
    models.load_state_dict(ck["entropy"])
    bbox = ck["bbox"]
    key = HierarchicalField(ck["start_frame"], [
        LevelGrid(i + 1, v, bbox) for i, v in enumerate(ck["keyframe"])])
    residuals = [ResidualSet(ck["start_frame"] + 1 + fi, [
        LevelGrid(i + 1, v, bbox) for i, v in enumerate(vals)])
        for fi, vals in enumerate(ck["residuals"])]
    gof = GoF(ck["start_frame"], key, residuals)
    stream = encode_trained_gof(gof, net, models, cfg)
    stream.save(args.out)
    print(f"wrote {args.out} ({len(stream.to_bytes())} bytes)")


def _render_cameras(args):
    if args.cameras:
        ds = load_dataset(args.cameras)
        ids = ds.test_ids or list(range(len(ds.cameras)))
        return [ds.cameras[i] for i in ids]
    return orbit_rig(1)


def cmd_decode(args):
    stream = GoFBitstream.load(args.stream)
    fields = decode_gof(stream, args.level)
    net = decoder_from_stream(stream)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cams = _render_cameras(args)
    with torch.no_grad():
        for field in fields:
            for ci, cam in enumerate(cams):
                img = render_image(field, net, cam, max_level=args.level,
                                   n_samples=args.samples)
                write_png(out / f"frame{field.frame_index:03d}_cam{ci:02d}.png", img)
    lvl = args.level or stream.stored_max_level
    print(f"decoded {len(fields)} frames at level {lvl} to {out}")


def cmd_truncate(args):
    stream = GoFBitstream.load(args.stream)
    short = truncate_stream(stream, args.level)
    short.save(args.out)
    print(f"wrote {args.out} ({len(short.to_bytes())} bytes, "
          f"levels <= {short.stored_max_level})")


def cmd_bench(args):
    stream = GoFBitstream.load(args.stream)
    ds = load_dataset(args.dataset)
    net = decoder_from_stream(stream)
    ids = ds.test_ids or list(range(len(ds.cameras)))
    rows = []
    for level in range(1, stream.stored_max_level + 1):
        short = truncate_stream(stream, level)
        nbytes = len(short.to_bytes())
        fields = decode_gof(short)
        ps, ss = [], []
        with torch.no_grad():
            for field in fields:
                t = field.frame_index
                for ci in ids:
                    img = render_image(field, net, ds.cameras[ci], max_level=level,
                                       n_samples=args.samples)
                    gt = ds.images[(t, ci)]
                    ps.append(psnr(img, gt))
                    ss.append(ssim(img, gt))
        rows.append({"level": level, "bytes": nbytes,
                     "psnr": sum(ps) / len(ps), "ssim": sum(ss) / len(ss)})
        print(f"level {level}: {nbytes} bytes, {rows[-1]['psnr']:.2f} dB, "
              f"SSIM {rows[-1]['ssim']:.4f}")
    if args.out:
        write_rd_csv(args.out, rows)


def cmd_stream(args):
    stream = GoFBitstream.load(args.stream)
    trace = BandwidthTrace.load(args.trace)
    report = simulate_session(stream, trace, args.interval)
    for rec in report.frames:
        print(f"frame {rec.frame}: level {rec.level}, {rec.bytes_sent:.0f} bytes"
              + (", stalled" if rec.stall else ""))
    print(f"total {report.total_bytes:.0f} of {report.budget_bytes:.0f} budget bytes, "
          f"stall {report.total_stall:.2f}s")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame", "level", "bytes_sent", "stall"])
            for rec in report.frames:
                w.writerow([rec.frame, rec.level, f"{rec.bytes_sent:.1f}", rec.stall])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="progvol",
                                description="progressive volumetric video codec")
    sub = p.add_subparsers(dest="command", required=True)

    scene = sub.add_parser("scene", help="synthetic scene utilities")
    ssub = scene.add_subparsers(dest="scene_command", required=True)
    gen = ssub.add_parser("gen", help="render a synthetic multi-view dataset")
    gen.add_argument("out")
    gen.add_argument("--frames", type=int, default=5)
    gen.add_argument("--cameras", type=int, default=10)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--samples", type=int, default=512)
    gen.set_defaults(func=cmd_scene_gen)

    tr = sub.add_parser("train", help="train a group of frames and encode it")
    tr.add_argument("dataset")
    tr.add_argument("-o", "--out", required=True, help="output .hpvc stream")
    tr.add_argument("--config", help="YAML training config")
    tr.add_argument("--maxiter", type=int, help="override iteration count")
    tr.add_argument("--bbox", type=float, nargs=6, metavar="F",
                    default=[-1, -1, -1, 1, 1, 1], help="xmin ymin zmin xmax ymax zmax")
    tr.add_argument("--metrics", help="per-iteration loss CSV")
    tr.add_argument("--checkpoint", help="save trained weights and grids")
    tr.set_defaults(func=cmd_train)

    en = sub.add_parser("encode", help="encode a training checkpoint to .hpvc")
    en.add_argument("checkpoint")
    en.add_argument("-o", "--out", required=True)
    en.set_defaults(func=cmd_encode)

    de = sub.add_parser("decode", help="decode a stream and render images")
    de.add_argument("stream")
    de.add_argument("out", help="output image directory")
    de.add_argument("--level", type=int, help="decode only levels <= this")
    de.add_argument("--cameras", help="dataset directory supplying render cameras")
    de.add_argument("--samples", type=int, default=64)
    de.set_defaults(func=cmd_decode)

    tc = sub.add_parser("truncate", help="drop levels above a cutoff")
    tc.add_argument("stream")
    tc.add_argument("-o", "--out", required=True)
    tc.add_argument("--level", type=int, required=True)
    tc.set_defaults(func=cmd_truncate)

    be = sub.add_parser("bench", help="rate/quality of every level prefix")
    be.add_argument("stream")
    be.add_argument("dataset")
    be.add_argument("-o", "--out", help="RD CSV output")
    be.add_argument("--samples", type=int, default=64)
    be.set_defaults(func=cmd_bench)

    st = sub.add_parser("stream", help="simulate delivery over a bandwidth trace")
    st.add_argument("stream")
    st.add_argument("trace", help="text file: '<seconds> <bytes_per_sec>' per line")
    st.add_argument("--interval", type=float, default=0.5, help="frame interval (s)")
    st.add_argument("-o", "--out", help="per-frame delivery CSV")
    st.set_defaults(func=cmd_stream)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
