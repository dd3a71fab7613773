"""Multi-resolution feature grids, residual recursion and feature sampling.

A frame of volumetric video is represented as a stack of dense voxel grids of
increasing resolution. Sampling a feature at a 3D point sums the trilinear
interpolation of every level up to a chosen maximum, so truncating the stack
degrades quality gracefully instead of breaking the representation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch


class GridShapeError(ValueError):
    """Raised when grids that must agree in shape do not."""


def make_bbox(lo: Sequence[float], hi: Sequence[float]) -> torch.Tensor:
    """Axis-aligned bounding box as a (2, 3) tensor: row 0 min, row 1 max."""
    bbox = torch.tensor([list(lo), list(hi)], dtype=torch.float64)
    if not (bbox[1] > bbox[0]).all():
        raise ValueError(f"degenerate bbox: {bbox.tolist()}")
    return bbox


@dataclass
class LevelGrid:
    """One resolution tier: dense (nx, ny, nz, C) feature values inside a bbox."""

    level: int
    values: torch.Tensor
    bbox: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 4:
            raise GridShapeError(f"level {self.level}: values must be (nx,ny,nz,C), got {tuple(self.values.shape)}")
        if min(self.values.shape[:3]) < 2:
            raise GridShapeError(f"level {self.level}: each axis needs >= 2 voxels")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[:3])

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    def check_finite(self):
        if not torch.isfinite(self.values).all():
            raise ValueError(f"level {self.level}: non-finite grid values")


class GridStack:
    """Ordered list of L LevelGrids (levels 1..L) sharing one bbox and C."""

    def __init__(self, frame_index: int, levels: Sequence[LevelGrid]):
        if not levels:
            raise GridShapeError("empty level list")
        for i, lg in enumerate(levels, start=1):
            if lg.level != i:
                raise GridShapeError(f"expected level {i}, got {lg.level}")
        c = levels[0].channels
        bbox = levels[0].bbox
        prev = None
        for lg in levels:
            if lg.channels != c:
                raise GridShapeError(f"level {lg.level}: channel count {lg.channels} != {c}")
            if not torch.equal(lg.bbox, bbox):
                raise GridShapeError(f"level {lg.level}: bbox differs from level 1")
            if prev is not None:
                if any(a < b for a, b in zip(lg.dims, prev)) or not any(a > b for a, b in zip(lg.dims, prev)):
                    raise GridShapeError(f"level {lg.level}: dims {lg.dims} do not increase over {prev}")
            prev = lg.dims
        self.frame_index = frame_index
        self.levels = list(levels)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def bbox(self) -> torch.Tensor:
        return self.levels[0].bbox

    @property
    def channels(self) -> int:
        return self.levels[0].channels

    def dims(self) -> list[tuple[int, int, int]]:
        return [lg.dims for lg in self.levels]


class HierarchicalField(GridStack):
    """The full feature-grid stack of one frame."""


class ResidualSet(GridStack):
    """Per-level frame-to-frame residual grids; same shapes as the field."""


@dataclass
class GoF:
    """Group of Features: a keyframe plus the residuals of the following frames."""

    start_frame: int
    keyframe: HierarchicalField
    residuals: list[ResidualSet] = field(default_factory=list)

    @property
    def length(self) -> int:
        return 1 + len(self.residuals)

    def __post_init__(self):
        for r in self.residuals:
            _check_matching(self.keyframe, r)


def _check_matching(a: GridStack, b: GridStack):
    if a.num_levels != b.num_levels:
        raise GridShapeError(f"level count mismatch: {a.num_levels} vs {b.num_levels}")
    for la, lb in zip(a.levels, b.levels):
        if la.dims != lb.dims or la.channels != lb.channels:
            raise GridShapeError(
                f"level {la.level}: shape {la.dims}x{la.channels} vs {lb.dims}x{lb.channels}")


def zero_field(frame_index: int, dims: Sequence[tuple[int, int, int]], channels: int,
               bbox: torch.Tensor, dtype=torch.float32) -> HierarchicalField:
    levels = [LevelGrid(i + 1, torch.zeros(*d, channels, dtype=dtype), bbox)
              for i, d in enumerate(dims)]
    return HierarchicalField(frame_index, levels)


def reconstruct_frame(reference: HierarchicalField, residual: ResidualSet) -> HierarchicalField:
    """Next frame's field: reference plus residual, level by level."""
    _check_matching(reference, residual)
    levels = [LevelGrid(ref.level, ref.values + res.values, ref.bbox)
              for ref, res in zip(reference.levels, residual.levels)]
    return HierarchicalField(residual.frame_index, levels)


def _corner_weights(grid: torch.Tensor, bbox: torch.Tensor, positions: torch.Tensor):
    """Trilinear corner indices and weights for a batch of points.

    Returns (flat_corner_index (M, 8), weight (M, 8), inside (M,)). Grid nodes
    sit on a lattice spanning the bbox (corner-aligned), so a point exactly on
    a node reproduces that node's value.
    """
    n = torch.tensor(grid.shape[:3], device=positions.device, dtype=positions.dtype)
    lo = bbox[0].to(positions.dtype)
    hi = bbox[1].to(positions.dtype)
    inside = ((positions >= lo) & (positions <= hi)).all(dim=-1)
    u = (positions - lo) / (hi - lo) * (n - 1)
    i0 = u.floor().clamp(torch.zeros(3, dtype=positions.dtype), n - 2)
    f = u - i0
    i0 = i0.long()
    nx, ny, nz = grid.shape[:3]
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    offsets = torch.tensor([(dx * ny + dy) * nz + dz
                            for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
                           device=positions.device)
    idx = base.unsqueeze(1) + offsets.unsqueeze(0)
    wx = torch.stack([1 - f[:, 0], f[:, 0]], dim=1)
    wy = torch.stack([1 - f[:, 1], f[:, 1]], dim=1)
    wz = torch.stack([1 - f[:, 2], f[:, 2]], dim=1)
    w = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    return idx, w, inside


def interpolate_level(grid: LevelGrid, positions: torch.Tensor) -> torch.Tensor:
    """Trilinear interpolation of one level at (M, 3) points; zero outside bbox.

    Runs on torch's grid_sample with corner-aligned nodes, so a point on a
    lattice node reproduces that node's value and gradients flow to both the
    grid values and the positions.
    """
    lo = grid.bbox[0].to(positions.dtype)
    hi = grid.bbox[1].to(positions.dtype)
    inside = ((positions >= lo) & (positions <= hi)).all(dim=-1)
    u = 2.0 * (positions - lo) / (hi - lo) - 1.0
    # grid_sample's last coordinate indexes the first value axis: feed (z, y, x).
    coords = u.flip(-1).reshape(1, 1, 1, -1, 3).to(grid.values.dtype)
    vol = grid.values.permute(3, 0, 1, 2).unsqueeze(0)
    out = torch.nn.functional.grid_sample(vol, coords, mode="bilinear",
                                          padding_mode="border", align_corners=True)
    out = out.reshape(grid.channels, -1).T
    return out * inside.unsqueeze(-1).to(out.dtype)


def sample_feature(field: GridStack, positions: torch.Tensor, max_level: int | None = None) -> torch.Tensor:
    """Summed per-level interpolation at (M, 3) points, levels 1..max_level.

    Points outside the bbox yield a zero feature by convention.
    """
    single = positions.ndim == 1
    pos = positions.unsqueeze(0) if single else positions
    if max_level is None:
        max_level = field.num_levels
    if not 1 <= max_level <= field.num_levels:
        raise ValueError(f"max_level {max_level} outside [1, {field.num_levels}]")
    out = interpolate_level(field.levels[0], pos)
    for lg in field.levels[1:max_level]:
        out = out + interpolate_level(lg, pos)
    return out.squeeze(0) if single else out


def grid_gradient_accumulate(field: GridStack, positions: torch.Tensor,
                             upstream: torch.Tensor, max_level: int | None = None) -> list[torch.Tensor]:
    """Adjoint of sample_feature: scatter upstream gradients onto the voxels.

    Returns one gradient tensor per level (zeros for levels above max_level).
    For interior points the distributed trilinear weights of a level sum to 1.
    """
    single = positions.ndim == 1
    pos = positions.unsqueeze(0) if single else positions
    up = upstream.unsqueeze(0) if single else upstream
    if max_level is None:
        max_level = field.num_levels
    grads = []
    for li, lg in enumerate(field.levels):
        g = torch.zeros_like(lg.values, dtype=up.dtype)
        if li < max_level:
            idx, w, inside = _corner_weights(lg.values, lg.bbox, pos)
            w = w * inside.unsqueeze(-1).to(w.dtype)
            contrib = w.unsqueeze(-1) * up.unsqueeze(1)        # (M, 8, C)
            g.reshape(-1, lg.channels).index_put_((idx.reshape(-1),),
                                                  contrib.reshape(-1, lg.channels),
                                                  accumulate=True)
        grads.append(g)
    return grads
