"""Build a synthetic scene, render reference views, and render the same
content from a dense feature grid through the neural decoder.

This walks the two rendering paths the codec relies on:
  * analytic ray marching of scene primitives (used to make ground truth),
  * trilinear feature-grid sampling + decoder network + alpha compositing
    (the path a decoded bitstream takes).

Run:  python3 demos/01_scene_and_render.py
Artifacts land in demos/out/01/.
"""
from pathlib import Path

import torch

from progvol import (HierarchicalField, LevelGrid, make_bbox, psnr,
                     render_image)
from progvol.renderer import DecoderNet
from progvol.scenes import default_scene, orbit_rig, render_ground_truth, write_png

torch.set_num_threads(1)
OUT = Path(__file__).parent / "out" / "01"
OUT.mkdir(parents=True, exist_ok=True)

scene = default_scene(n_frames=3)
cameras = orbit_rig(4, width=96, height=96, focal=105.0)

print("rendering analytic ground truth for 3 frames x 4 cameras ...")
for t in range(3):
    for ci, cam in enumerate(cameras):
        img = render_ground_truth(scene, cam, t, n_samples=256)
        write_png(OUT / f"gt_frame{t}_cam{ci}.png", img)

# Now the codec-side path: bake the scene's density and color into a raw
# feature grid (channels = [r, g, b, density]) and decode it with a network
# that simply passes those channels through. A trained decoder would instead
# turn learned features into color/density; the plumbing is identical.
bbox = make_bbox((-1, -1, -1), (1, 1, 1))
n = 48
ax = [torch.linspace(bbox[0, i], bbox[1, i], n) for i in range(3)]
X, Y, Z = torch.meshgrid(*ax, indexing="ij")
pts = torch.stack([X, Y, Z], dim=-1).reshape(-1, 3)
sigma, rgb = scene.density_color(0, pts)
feats = torch.cat([rgb, sigma.unsqueeze(-1)], dim=-1).reshape(n, n, n, 4)
field = HierarchicalField(0, [LevelGrid(1, feats, bbox)])


class PassThrough(DecoderNet):
    """Reads color/density straight out of the grid channels."""

    def forward(self, features, dir_enc):
        return features[..., :3].clamp(0, 1), features[..., 3].clamp_min(0)


net = PassThrough(channels=4)
print(f"rendering the same frame from a {n}^3 feature grid ...")
with torch.no_grad():
    for ci, cam in enumerate(cameras):
        img = render_image(field, net, cam, n_samples=256)
        gt = render_ground_truth(scene, cam, 0, n_samples=256)
        write_png(OUT / f"grid_frame0_cam{ci}.png", img)
        print(f"  camera {ci}: grid render vs analytic = {psnr(img, gt):.2f} dB "
              f"(limited by the {n}^3 resolution)")

print(f"done; images in {OUT}")
