"""Synthetic animated scenes with analytic ground truth, and dataset I/O.

Scenes are a handful of moving primitives (spheres, boxes) with constant color
and density. Ground-truth images come from the same emission-absorption
integrator the codec uses, evaluated directly on the analytic fields at a high
sample count, so trained models are compared against a consistent oracle.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .field import make_bbox
from .renderer import Camera, composite, intersect_bbox, sample_ts


class DatasetError(ValueError):
    """Missing or malformed dataset directory contents."""


@dataclass
class Primitive:
    """One animated shape: a sphere (size = radius) or an axis-aligned box
    (size = half extent). Motion is a circular orbit in the xy plane plus a
    sinusoidal pulse of the size."""

    kind: str
    color: tuple[float, float, float]
    density: float
    center: tuple[float, float, float]
    size: float
    orbit_radius: float = 0.0
    orbit_period: float = 8.0
    pulse_amp: float = 0.0
    pulse_period: float = 8.0
    edge: float = 0.0               # width of a smooth density falloff; 0 = hard

    def center_at(self, frame: int) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.orbit_radius > 0:
            th = 2 * math.pi * frame / self.orbit_period
            c = c + self.orbit_radius * np.array([math.cos(th), math.sin(th), 0.0])
        return c

    def size_at(self, frame: int) -> float:
        return self.size * (1.0 + self.pulse_amp * math.sin(2 * math.pi * frame / self.pulse_period))


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    bbox: torch.Tensor
    n_frames: int

    def __post_init__(self):
        lo = self.bbox[0].numpy()
        hi = self.bbox[1].numpy()
        for p in self.primitives:
            if p.density < 0:
                raise ValueError(f"negative density on {p.kind}")
            for t in range(self.n_frames):
                c = p.center_at(t)
                s = p.size_at(t) + p.edge / 2
                if (c - s < lo).any() or (c + s > hi).any():
                    raise ValueError(f"{p.kind} leaves bbox at frame {t}")

    def density_color(self, frame: int, pts: torch.Tensor):
        """Analytic fields at (M, 3) points: density sum, density-weighted color."""
        sigma = torch.zeros(pts.shape[0], dtype=pts.dtype)
        rgb_acc = torch.zeros(pts.shape[0], 3, dtype=pts.dtype)
        for p in self.primitives:
            c = torch.as_tensor(p.center_at(frame), dtype=pts.dtype)
            s = p.size_at(frame)
            d = pts - c
            if p.kind == "sphere":
                signed = d.norm(dim=-1) - s
            elif p.kind == "box":
                signed = d.abs().amax(-1) - s
            else:
                raise ValueError(f"unknown primitive kind {p.kind!r}")
            if p.edge > 0:
                occ = (0.5 - signed / p.edge).clamp(0.0, 1.0)
            else:
                occ = (signed <= 0).to(pts.dtype)
            w = occ * p.density
            sigma = sigma + w
            rgb_acc = rgb_acc + w.unsqueeze(-1) * torch.tensor(p.color, dtype=pts.dtype)
        rgb = rgb_acc / sigma.clamp_min(1e-12).unsqueeze(-1)
        return sigma, rgb


def default_scene(n_frames: int = 5) -> SceneSpec:
    """Desk-scale default: an orbiting sphere and a pulsating box."""
    bbox = make_bbox((-1, -1, -1), (1, 1, 1))
    prims = [
        Primitive("sphere", color=(0.9, 0.25, 0.2), density=30.0,
                  center=(0.0, 0.0, 0.3), size=0.28, orbit_radius=0.3, orbit_period=20.0),
        Primitive("box", color=(0.2, 0.4, 0.9), density=30.0,
                  center=(0.0, 0.0, -0.4), size=0.3, pulse_amp=0.12, pulse_period=10.0),
    ]
    return SceneSpec(prims, bbox, n_frames)


def render_ground_truth(spec: SceneSpec, camera: Camera, frame: int,
                        n_samples: int = 512, chunk: int = 2048) -> torch.Tensor:
    """Analytic volume render through the shared integrator; (H, W, 3)."""
    origins, dirs = camera.rays(torch.float64)
    t_near, t_far, hit = intersect_bbox(origins, dirs, spec.bbox)
    out = torch.zeros(origins.shape[0], 3, dtype=torch.float64)
    idx = hit.nonzero(as_tuple=True)[0]
    for s in range(0, idx.numel(), chunk):
        sel = idx[s:s + chunk]
        ts = sample_ts(t_near[sel], t_far[sel], n_samples)
        deltas = torch.cat([ts[:, 1:] - ts[:, :-1],
                            (t_far[sel].unsqueeze(-1) - ts[:, -1:])], dim=1)
        pts = origins[sel].unsqueeze(1) + dirs[sel].unsqueeze(1) * ts.unsqueeze(-1)
        sigma, rgb = spec.density_color(frame, pts.reshape(-1, 3))
        n_rays = sel.numel()
        color, _, _ = composite(rgb.reshape(n_rays, n_samples, 3),
                                sigma.reshape(n_rays, n_samples), deltas)
        out[sel] = color
    return out.reshape(camera.height, camera.width, 3).float()


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> torch.Tensor:
    """World-from-camera pose with the camera's -z axis aimed at the target."""
    p = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - p
    f = f / np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    up_cam = np.cross(right, f)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = up_cam
    pose[:3, 2] = -f
    pose[:3, 3] = p
    return torch.from_numpy(pose)


def orbit_rig(n_cameras: int = 10, radius: float = 2.6, elevation: float = 0.9,
              target=(0.0, 0.0, 0.0), width: int = 64, height: int = 64,
              focal: float = 70.0) -> list[Camera]:
    """Cameras on a circle around the target, all looking at it."""
    cams = []
    for k in range(n_cameras):
        th = 2 * math.pi * k / n_cameras
        pos = (target[0] + radius * math.cos(th),
               target[1] + radius * math.sin(th),
               target[2] + elevation)
        pose = look_at_pose(pos, target)
        cams.append(Camera(focal, focal, width / 2, height / 2, width, height, pose))
    return cams


@dataclass
class Dataset:
    """Per-frame, per-camera float images plus cameras and a train/test split."""

    cameras: list[Camera]
    images: dict                      # (frame, cam_index) -> (H, W, 3) float tensor
    train_ids: list[int]
    test_ids: list[int]
    n_frames: int

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise DatasetError("train/test split overlaps")
        shapes = {tuple(im.shape) for im in self.images.values()}
        if len(shapes) > 1:
            raise DatasetError(f"inconsistent image shapes: {shapes}")


def write_png(path: Path, image: torch.Tensor):
    arr = (image.detach().clamp(0, 1).numpy() * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def generate_dataset(spec: SceneSpec, cameras: list[Camera], out_dir,
                     n_train: int | None = None, n_samples: int = 512) -> Dataset:
    """Render every (frame, camera) pair and write images plus a manifest.

    The last cameras of the rig form the test split (mirroring a mostly-train
    capture rig). Writes both 8-bit PNGs and lossless .npy floats.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if n_train is None:
        n_train = max(1, len(cameras) - 2)
    train_ids = list(range(n_train))
    test_ids = list(range(n_train, len(cameras)))
    images = {}
    for t in range(spec.n_frames):
        for ci, cam in enumerate(cameras):
            img = render_ground_truth(spec, cam, t, n_samples)
            images[(t, ci)] = img
            stem = f"frame{t:03d}_cam{ci:02d}"
            write_png(out / f"{stem}.png", img)
            np.save(out / f"{stem}.npy", img.numpy())
    manifest = {
        "n_frames": spec.n_frames,
        "train_ids": train_ids,
        "test_ids": test_ids,
        "cameras": [{
            "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height,
            "pose": c.pose.numpy().tolist(),
        } for c in cameras],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return Dataset(cameras, images, train_ids, test_ids, spec.n_frames)


def load_dataset(path) -> Dataset:
    """Load a generated dataset directory, validating the manifest and files."""
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise DatasetError(f"no manifest found in {root}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {mf}: {e}") from e
    cameras = [Camera(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"],
                      torch.tensor(c["pose"], dtype=torch.float64))
               for c in manifest["cameras"]]
    images = {}
    for t in range(manifest["n_frames"]):
        for ci in range(len(cameras)):
            f = root / f"frame{t:03d}_cam{ci:02d}.npy"
            if not f.exists():
                raise DatasetError(f"missing image file {f}")
            images[(t, ci)] = torch.from_numpy(np.load(f)).float()
    return Dataset(cameras, images, manifest["train_ids"], manifest["test_ids"],
                   manifest["n_frames"])
