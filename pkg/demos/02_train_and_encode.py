"""Train a small group of frames end to end and encode it to a .hpvc stream.

This is a miniature of the full pipeline: synthesize a multi-view dataset,
jointly optimize the hierarchical grids + decoder + entropy model with the
progressive level schedule, then write the layered bitstream. The
configuration is deliberately tiny so the demo finishes in about a minute;
see the README for the full-quality settings.

Run:  python3 demos/02_train_and_encode.py
Artifacts (dataset, stream, decoded previews) land in demos/out/02/.
"""
from pathlib import Path

import torch

from progvol import (TrainConfig, decode_gof, decoder_from_stream,
                     encode_trained_gof, make_bbox, psnr, render_image,
                     train_gof)
from progvol.scenes import default_scene, generate_dataset, orbit_rig, write_png

torch.set_num_threads(1)
OUT = Path(__file__).parent / "out" / "02"
OUT.mkdir(parents=True, exist_ok=True)

N_FRAMES = 3
print("generating a 3-frame, 6-camera dataset at 32x32 ...")
dataset = generate_dataset(default_scene(N_FRAMES),
                           orbit_rig(6, width=32, height=32, focal=35.0),
                           OUT / "dataset", n_samples=256)

cfg = TrainConfig(n_levels=3, gof_length=N_FRAMES, maxiter=400, actiter=40,
                  ray_batch=256, n_samples=16, channels=6, hidden=32,
                  n_freqs=3, level_dims=((7, 7, 7), (12, 12, 12), (20, 20, 20)))
bbox = make_bbox((-1, -1, -1), (1, 1, 1))

print(f"training {N_FRAMES} frames, {cfg.n_levels} levels, "
      f"{cfg.maxiter} iterations per frame ...")
rows: list = []
gof, net, models, logs = train_gof(dataset, cfg, bbox=bbox, log_rows=rows)
key_rows = [r for r in rows if r["frame"] == 0]
first = sum(r["loss"] for r in key_rows[:10]) / 10
last = sum(r["loss"] for r in key_rows[-10:]) / 10
print(f"  keyframe loss {first:.4f} -> {last:.4f}")
for e in logs[0].events:
    print(f"  keyframe schedule: iter {e.iteration:4d} {e.kind} "
          + (f"level {e.level}" if e.level else ""))

stream = encode_trained_gof(gof, net, models, cfg)
path = OUT / "clip.hpvc"
stream.save(path)
sizes = stream.chunk_sizes()
print(f"wrote {path} ({path.stat().st_size} bytes)")
for f, per_level in enumerate(sizes):
    print(f"  frame {f}: " + ", ".join(
        f"L{l + 1}={b}B" for l, b in enumerate(per_level)))

print("decoding the stream back and rendering a held-out view ...")
fields = decode_gof(stream)
dec_net = decoder_from_stream(stream)
cam_id = dataset.test_ids[0]
with torch.no_grad():
    for field in fields:
        img = render_image(field, dec_net, dataset.cameras[cam_id], n_samples=32)
        gt = dataset.images[(field.frame_index, cam_id)]
        write_png(OUT / f"decoded_frame{field.frame_index}.png", img)
        print(f"  frame {field.frame_index}: {psnr(img, gt):.2f} dB on the test view")
print(f"done; artifacts in {OUT}")
