"""Decoder network and differentiable volume rendering along camera rays.

Merged grid features are mapped to color and density by a small shared MLP and
composited with the standard emission-absorption integral. The same
`composite` routine is reused by the analytic ground-truth renderer so both
sides of every comparison integrate identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .field import GridStack, sample_feature


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, pose is world-from-camera (4x4).

    Camera looks down -z, x right, y up (OpenGL-style).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: torch.Tensor

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        self.pose = torch.as_tensor(self.pose, dtype=torch.float64)
        if self.pose.shape != (4, 4):
            raise ValueError("pose must be 4x4")
        r = self.pose[:3, :3]
        if (r @ r.T - torch.eye(3, dtype=r.dtype)).abs().max() > 1e-6:
            raise ValueError("pose rotation is not orthonormal")

    def rays(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Ray origins and unit directions for every pixel center, row-major."""
        j, i = torch.meshgrid(torch.arange(self.height, dtype=torch.float64),
                              torch.arange(self.width, dtype=torch.float64),
                              indexing="ij")
        x = (i + 0.5 - self.cx) / self.fx
        y = -(j + 0.5 - self.cy) / self.fy
        d_cam = torch.stack([x, y, -torch.ones_like(x)], dim=-1).reshape(-1, 3)
        d_world = d_cam @ self.pose[:3, :3].T
        d_world = d_world / d_world.norm(dim=-1, keepdim=True)
        o = self.pose[:3, 3].expand_as(d_world)
        return o.to(dtype), d_world.to(dtype)


@dataclass
class Ray:
    origin: torch.Tensor
    direction: torch.Tensor
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = torch.as_tensor(self.origin)
        self.direction = torch.as_tensor(self.direction)
        if abs(float(self.direction.norm()) - 1.0) > 1e-6:
            raise ValueError("direction must be unit length")
        if not (0 < self.t_near < self.t_far):
            raise ValueError(f"need 0 < t_near < t_far, got [{self.t_near}, {self.t_far}]")


class DecoderNet(nn.Module):
    """MLP from (merged feature, encoded view direction) to (rgb, density).

    Color uses a sigmoid head, density a softplus head, so outputs satisfy
    rgb in [0,1]^3 and sigma >= 0 by construction.
    """

    def __init__(self, channels: int = 8, hidden: int = 64, n_freqs: int = 4):
        super().__init__()
        self.channels = channels
        self.hidden = hidden
        self.n_freqs = n_freqs
        in_dim = channels + 3 + 6 * n_freqs
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 4),
        )

    def encode_direction(self, dirs: torch.Tensor) -> torch.Tensor:
        parts = [dirs]
        for k in range(self.n_freqs):
            parts.append(torch.sin((2.0 ** k) * math.pi * dirs))
            parts.append(torch.cos((2.0 ** k) * math.pi * dirs))
        return torch.cat(parts, dim=-1)

    def forward(self, features: torch.Tensor, dir_enc: torch.Tensor):
        raw = self.net(torch.cat([features, dir_enc], dim=-1))
        rgb = torch.sigmoid(raw[..., :3])
        sigma = nn.functional.softplus(raw[..., 3])
        return rgb, sigma


def decode_point(net: DecoderNet, feature: torch.Tensor, direction: torch.Tensor):
    """Color and density of a single point (or a batch of points)."""
    if not torch.isfinite(feature).all():
        raise ValueError("non-finite feature")
    single = feature.ndim == 1
    f = feature.unsqueeze(0) if single else feature
    d = direction.unsqueeze(0) if single else direction
    rgb, sigma = net(f, net.encode_direction(d))
    return (rgb.squeeze(0), sigma.squeeze(0)) if single else (rgb, sigma)


def composite(rgb: torch.Tensor, sigma: torch.Tensor, deltas: torch.Tensor):
    """Emission-absorption integral along rays.

    rgb: (R, S, 3), sigma/deltas: (R, S). Returns (color (R, 3),
    transmittance-after-last-sample (R,), per-sample weights (R, S)).
    """
    tau = sigma * deltas
    alpha = 1.0 - torch.exp(-tau)
    trans = torch.exp(-torch.cumsum(
        torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], dim=1), dim=1))
    weights = trans * alpha
    color = (weights.unsqueeze(-1) * rgb).sum(dim=1)
    t_end = trans[:, -1] * torch.exp(-tau[:, -1])
    return color, t_end, weights


def sample_ts(t_near: torch.Tensor, t_far: torch.Tensor, n_samples: int,
              generator: torch.Generator | None = None) -> torch.Tensor:
    """Stratified sample positions: one point per equal bin, jittered if a
    generator is given, else the bin midpoints."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    span = (t_far - t_near).unsqueeze(-1)
    edges = torch.linspace(0.0, 1.0, n_samples + 1, dtype=span.dtype)[:-1]
    if generator is None:
        off = torch.full((t_near.shape[0], n_samples), 0.5, dtype=span.dtype)
    else:
        off = torch.rand(t_near.shape[0], n_samples, generator=generator, dtype=span.dtype)
    return t_near.unsqueeze(-1) + (edges + off / n_samples) * span


def intersect_bbox(origins: torch.Tensor, dirs: torch.Tensor, bbox: torch.Tensor,
                   t_min: float = 1e-3):
    """Slab test: per-ray [t_near, t_far] against the bbox, and a hit mask."""
    lo = bbox[0].to(origins.dtype)
    hi = bbox[1].to(origins.dtype)
    inv = 1.0 / torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    t_near = torch.minimum(t0, t1).amax(dim=-1).clamp_min(t_min)
    t_far = torch.maximum(t0, t1).amin(dim=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


def render_rays(field: GridStack, net: DecoderNet, origins: torch.Tensor,
                dirs: torch.Tensor, t_near: torch.Tensor, t_far: torch.Tensor,
                max_level: int | None = None, n_samples: int = 128,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Batched volume rendering; returns (R, 3) colors on black background."""
    if not torch.all(t_far > t_near):
        raise ValueError("degenerate ray: t_near >= t_far")
    ts = sample_ts(t_near, t_far, n_samples, generator)
    deltas = torch.cat([ts[:, 1:] - ts[:, :-1],
                        (t_far.unsqueeze(-1) - ts[:, -1:])], dim=1)
    pts = origins.unsqueeze(1) + dirs.unsqueeze(1) * ts.unsqueeze(-1)
    feats = sample_feature(field, pts.reshape(-1, 3), max_level)
    dir_enc = net.encode_direction(dirs)
    n_rays = origins.shape[0]
    enc = dir_enc.unsqueeze(1).expand(n_rays, n_samples, -1).reshape(n_rays * n_samples, -1)
    rgb, sigma = net(feats, enc)
    color, _, _ = composite(rgb.reshape(n_rays, n_samples, 3),
                            sigma.reshape(n_rays, n_samples),
                            deltas)
    return color


def render_ray(field: GridStack, net: DecoderNet, ray: Ray,
               max_level: int | None = None, n_samples: int = 128,
               generator: torch.Generator | None = None) -> torch.Tensor:
    dtype = field.levels[0].values.dtype
    return render_rays(field, net,
                       ray.origin.to(dtype).unsqueeze(0),
                       ray.direction.to(dtype).unsqueeze(0),
                       torch.tensor([ray.t_near], dtype=dtype),
                       torch.tensor([ray.t_far], dtype=dtype),
                       max_level, n_samples, generator)[0]


def render_image(field: GridStack, net: DecoderNet, camera: Camera,
                 max_level: int | None = None, n_samples: int = 128,
                 generator: torch.Generator | None = None,
                 chunk: int = 8192) -> torch.Tensor:
    """Per-pixel rendering of the whole camera; (H, W, 3), black background."""
    dtype = field.levels[0].values.dtype
    origins, dirs = camera.rays(dtype)
    t_near, t_far, hit = intersect_bbox(origins, dirs, field.bbox)
    out = torch.zeros(origins.shape[0], 3, dtype=dtype)
    idx = hit.nonzero(as_tuple=True)[0]
    for s in range(0, idx.numel(), chunk):
        sel = idx[s:s + chunk]
        out[sel] = render_rays(field, net, origins[sel], dirs[sel],
                               t_near[sel], t_far[sel], max_level,
                               n_samples, generator)
    return out.reshape(camera.height, camera.width, 3)
