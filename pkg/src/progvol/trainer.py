"""Joint optimization of grids, decoder and entropy models.

Levels are grown and retired on a fixed schedule: only level 1 trains at
first, one more level activates every `actiter` iterations, and near the end
levels freeze again from the bottom up (level l freezes at
maxiter - (L - l) * actiter). Each active level is supervised by rendering up
to that level, with simulated quantization noise on its residuals, a learned
rate estimate and an L1 magnitude penalty. Frames train sequentially; each
frame's reference is the dequantized reconstruction of its predecessor, so
the optimization sees exactly what a decoder will see.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import torch

from .entropy import EntropyModel
from .field import (GoF, GridStack, HierarchicalField, LevelGrid, ResidualSet,
                    interpolate_level, make_bbox)
from .quant import dequantize, quantize
from .renderer import DecoderNet, composite, intersect_bbox, sample_ts
from .scenes import Dataset

DESK_LEVEL_SCHEDULE = (11, 13, 16, 19, 23, 28)


class ScheduleError(ValueError):
    """Config whose activation/freeze events cannot all happen in order."""


def default_level_dims(n_levels: int, bbox: torch.Tensor,
                       schedule: Sequence[int] = DESK_LEVEL_SCHEDULE) -> list[tuple[int, int, int]]:
    """Per-level grid dims: a geometric resolution ladder scaled to the bbox aspect."""
    if n_levels == len(schedule):
        base = list(schedule)
    else:
        lo, hi = schedule[0], schedule[-1]
        base = [round(lo * (hi / lo) ** (i / max(1, n_levels - 1))) for i in range(n_levels)]
        for i in range(1, n_levels):
            base[i] = max(base[i], base[i - 1] + 1)
    extent = (bbox[1] - bbox[0]).tolist()
    m = max(extent)
    return [tuple(max(2, round(n * e / m)) for e in extent) for n in base]


@dataclass
class TrainConfig:
    n_levels: int = 6
    gof_length: int = 20
    maxiter: int = 4000
    actiter: int = 250
    lambda1: float = 1e-6
    lambda2: float = 1e-6
    # Multiplier on lambda1/lambda2 for non-keyframe frames. Residual grids
    # must cancel the reference's fine detail wherever content moves; the
    # full keyframe-strength rate penalty blocks that cancelation and makes
    # the finest levels *hurt* novel views, so residuals get lighter
    # pressure by default.
    lambda_residual_scale: float = 0.2
    alpha_top: float = 1.0
    alpha_low: float = 0.5
    q: float | Sequence[float] = 20.0
    lr_grid: float = 0.1
    lr_decoder: float = 1e-3
    lr_entropy: float = 1e-3
    # Decoder learning rate on non-keyframe frames. The group shares one
    # decoder, and the stored stream keeps only its final state; letting it
    # drift while later frames train silently degrades every earlier frame.
    # The default freezes it after the keyframe.
    lr_decoder_residual: float = 0.0
    ray_batch: int = 512
    n_samples: int = 24
    channels: int = 8
    hidden: int = 64
    n_freqs: int = 4
    level_dims: Sequence[tuple[int, int, int]] | None = None
    rate_subsample: int = 2048          # grid elements per level per step; 0 = full
    # Normalization of the rate term: "total-bits" charges the estimated bits
    # of the whole level, "per-element-bits" divides by the level's element
    # count so lambda1 is resolution-independent.
    rate_mode: str = "total-bits"
    low_level_ray_frac: float = 0.25    # share of the ray batch spent on non-top levels
    keyframe_init: float = 1e-2
    seed: int = 0

    def qs(self) -> list[float]:
        if isinstance(self.q, (int, float)):
            return [float(self.q)] * self.n_levels
        q = [float(v) for v in self.q]
        if len(q) != self.n_levels:
            raise ValueError("q list must have one entry per level")
        return q

    def alphas(self) -> list[float]:
        return [self.alpha_low] * (self.n_levels - 1) + [self.alpha_top]

    def validate(self):
        L = self.n_levels
        if self.maxiter <= 2 * (L - 1) * self.actiter:
            raise ScheduleError(
                f"maxiter {self.maxiter} must exceed 2*(L-1)*actiter = "
                f"{2 * (L - 1) * self.actiter}: the last activation would land "
                f"after the first freeze")
        if self.gof_length < 1:
            raise ScheduleError("gof_length must be >= 1")
        if any(a < 0 for a in (self.lambda1, self.lambda2, self.lambda_residual_scale,
                               self.alpha_top, self.alpha_low)):
            raise ScheduleError("lambdas, alphas and their scales must be nonnegative")
        if self.rate_mode not in ("total-bits", "per-element-bits"):
            raise ScheduleError(f"unknown rate_mode {self.rate_mode!r}")


@dataclass
class TrainEvent:
    iteration: int
    kind: str                # activate | freeze | zero_lambda
    level: int = 0


@dataclass
class TrainEventLog:
    events: list[TrainEvent] = dc_field(default_factory=list)
    init_hashes: dict = dc_field(default_factory=dict)
    activation_hashes: dict = dc_field(default_factory=dict)
    freeze_hashes: dict = dc_field(default_factory=dict)
    final_hashes: dict = dc_field(default_factory=dict)

    def of_kind(self, kind: str) -> list[TrainEvent]:
        return [e for e in self.events if e.kind == kind]


def level_hash(values: torch.Tensor) -> bytes:
    return hashlib.sha1(values.detach().cpu().contiguous().numpy().tobytes()).digest()


def schedule_events(cfg: TrainConfig, is_keyframe: bool) -> list[TrainEvent]:
    """The activation/freeze timeline implied by (L, maxiter, actiter)."""
    cfg.validate()
    L = cfg.n_levels
    ev = [TrainEvent(l * cfg.actiter, "activate", l + 1) for l in range(1, L)]
    for l in range(1, L):
        ev.append(TrainEvent(cfg.maxiter - l * cfg.actiter, "freeze", L - l))
    ev.sort(key=lambda e: e.iteration)
    if is_keyframe and L > 1:
        first_freeze = min(e.iteration for e in ev if e.kind == "freeze")
        ev.append(TrainEvent(first_freeze, "zero_lambda"))
        ev.sort(key=lambda e: e.iteration)
    return ev


@dataclass
class ReferenceBuffer:
    """Dequantized reconstruction of the previous frame, all levels."""

    field: HierarchicalField


def loss_level(level: int, rendered: torch.Tensor, gt: torch.Tensor,
               noisy_residual: torch.Tensor | None, model: EntropyModel | None,
               q: float = 1.0, prev_loss: torch.Tensor | float = 0.0,
               alpha: float = 1.0, lambda1: float = 0.0, lambda2: float = 0.0,
               rate_scale: float = 1.0) -> tuple[torch.Tensor, dict]:
    """One stage of the multi-rate-distortion loss.

    total = prev + alpha * MSE + lambda1 * rate + lambda2 * L1, where MSE is
    the per-ray mean of the squared color error (summed over channels), rate
    is the estimated bits of the noisy residual scaled into the symbol domain
    by q, and L1 is the residual magnitude penalty. `rate_scale` extrapolates
    a subsampled residual to the full element count.
    """
    mse = ((rendered - gt) ** 2).sum(dim=-1).mean()
    zero = torch.zeros((), dtype=rendered.dtype)
    rate = zero
    reg = zero
    if noisy_residual is not None and model is not None:
        if lambda1 > 0:
            rate = model.rate_estimate(level, noisy_residual * q) * rate_scale
        if lambda2 > 0:
            reg = noisy_residual.abs().sum() * rate_scale
    total = prev_loss + alpha * mse + lambda1 * rate + lambda2 * reg
    return total, {"mse": float(mse.detach()), "rate_bits": float(rate.detach()),
                   "l1": float(reg.detach())}


class _RayBank:
    """All training rays of one frame that intersect the bbox, flattened."""

    def __init__(self, images: list[torch.Tensor], cameras, bbox, dtype=torch.float32):
        origins, dirs, nears, fars, colors = [], [], [], [], []
        for img, cam in zip(images, cameras):
            o, d = cam.rays(dtype)
            tn, tf, hit = intersect_bbox(o, d, bbox)
            idx = hit.nonzero(as_tuple=True)[0]
            origins.append(o[idx])
            dirs.append(d[idx])
            nears.append(tn[idx])
            fars.append(tf[idx])
            colors.append(img.reshape(-1, 3)[idx].to(dtype))
        self.origins = torch.cat(origins)
        self.dirs = torch.cat(dirs)
        self.t_near = torch.cat(nears)
        self.t_far = torch.cat(fars)
        self.colors = torch.cat(colors)
        self.count = self.origins.shape[0]


def train_frame(images: list[torch.Tensor], cameras, reference: ReferenceBuffer | None,
                cfg: TrainConfig, net: DecoderNet, models: EntropyModel,
                frame_index: int, is_keyframe: bool | None = None,
                bbox: torch.Tensor | None = None,
                log_rows: list | None = None,
                iter_hook: Callable | None = None):
    """Optimize one frame's residual grids following the progressive schedule.

    Returns (trained stack, event log). The stack is a HierarchicalField for
    keyframes (residual against an implicit zero reference) and a ResidualSet
    otherwise.
    """
    cfg.validate()
    if is_keyframe is None:
        is_keyframe = reference is None
    if reference is None and not is_keyframe:
        raise ValueError("non-keyframe training needs a reference buffer")
    if bbox is None:
        bbox = reference.field.bbox if reference else make_bbox((-1, -1, -1), (1, 1, 1))
    L = cfg.n_levels
    qs = cfg.qs()
    alphas = cfg.alphas()
    dims = list(cfg.level_dims) if cfg.level_dims else default_level_dims(L, bbox)

    gen = torch.Generator().manual_seed(cfg.seed + 7919 * frame_index)
    params = []
    for li in range(L):
        if is_keyframe:
            v = (torch.rand(*dims[li], cfg.channels, generator=gen) * 2 - 1) * cfg.keyframe_init
        else:
            v = torch.zeros(*dims[li], cfg.channels)
        params.append(torch.nn.Parameter(v))
    if reference is not None:
        if reference.field.dims() != [tuple(d) for d in dims]:
            raise ValueError(f"reference dims {reference.field.dims()} do not match "
                             f"config dims {dims}")
        ref_vals = [lv.values.detach().clone() for lv in reference.field.levels]
    else:
        ref_vals = [torch.zeros_like(p) for p in params]

    log = TrainEventLog()
    log.init_hashes = {li + 1: level_hash(params[li]) for li in range(L)}
    events = schedule_events(cfg, is_keyframe)
    by_iter: dict[int, list[TrainEvent]] = {}
    for e in events:
        by_iter.setdefault(e.iteration, []).append(e)

    bank = _RayBank(images, cameras, bbox)
    lr_decoder = cfg.lr_decoder if is_keyframe else cfg.lr_decoder_residual
    opt = torch.optim.Adam([
        {"params": params, "lr": cfg.lr_grid},
        {"params": net.parameters(), "lr": lr_decoder},
        {"params": models.parameters(), "lr": cfg.lr_entropy},
    ])
    active = {1}
    frozen_vals: dict[int, torch.Tensor] = {}
    noise_cache: dict[int, torch.Tensor] = {}
    res_scale = 1.0 if is_keyframe else cfg.lambda_residual_scale
    lam1, lam2 = cfg.lambda1 * res_scale, cfg.lambda2 * res_scale
    for li in range(1, L):
        params[li].requires_grad_(False)

    clamp = [127.0 / q for q in qs]     # keeps every frame's span inside uint8
    for it in range(1, cfg.maxiter + 1):
        for e in by_iter.get(it, ()):
            log.events.append(e)
            if e.kind == "activate":
                active.add(e.level)
                log.activation_hashes[e.level] = level_hash(params[e.level - 1])
                params[e.level - 1].requires_grad_(True)
            elif e.kind == "freeze":
                active.discard(e.level)
                noise_cache.pop(e.level, None)
                params[e.level - 1].requires_grad_(False)
                log.freeze_hashes[e.level] = level_hash(params[e.level - 1])
                with torch.no_grad():
                    ql = quantize(LevelGrid(e.level, params[e.level - 1].detach(), bbox),
                                  qs[e.level - 1])
                    frozen_vals[e.level] = dequantize(ql).values
            elif e.kind == "zero_lambda":
                lam1, lam2 = 0.0, 0.0

        idx = torch.randint(bank.count, (min(cfg.ray_batch, bank.count),), generator=gen)
        ts = sample_ts(bank.t_near[idx], bank.t_far[idx], cfg.n_samples, gen)
        deltas = torch.cat([ts[:, 1:] - ts[:, :-1],
                            bank.t_far[idx].unsqueeze(-1) - ts[:, -1:]], dim=1)
        pts = (bank.origins[idx].unsqueeze(1)
               + bank.dirs[idx].unsqueeze(1) * ts.unsqueeze(-1)).reshape(-1, 3)
        n_rays = idx.shape[0]

        max_active = max(active) if active else 0
        # Quantization noise is refreshed one active level per iteration;
        # drawing fresh uniforms over every full grid would dominate the step.
        act_sorted = sorted(active)
        stale = act_sorted[it % len(act_sorted)] if act_sorted else 0
        for level in act_sorted:
            if level not in noise_cache or level == stale:
                noise_cache[level] = (torch.rand(params[level - 1].shape,
                                                 generator=gen) - 0.5) / qs[level - 1]
        noisy: dict[int, torch.Tensor] = {}
        feats = torch.zeros(pts.shape[0], cfg.channels)
        level_feats = {}
        for li in range(max_active):
            level = li + 1
            if level in active:
                vals = params[li] + noise_cache[level]
                noisy[level] = vals
            elif level in frozen_vals:
                vals = frozen_vals[level]
            else:                       # never-activated level: its init (zeros)
                vals = params[li].detach()
            merged = ref_vals[li] + vals
            feats = feats + interpolate_level(LevelGrid(level, merged, bbox), pts)
            if level in active:
                level_feats[level] = feats

        dir_enc = net.encode_direction(bank.dirs[idx])
        enc = dir_enc.unsqueeze(1).expand(n_rays, cfg.n_samples, -1)
        sup = sorted(level_feats)
        # The top supervised level sees the full ray batch; lower levels get a
        # sub-batch (their loss weight is low and their content is coarse).
        low_rays = max(1, int(round(n_rays * cfg.low_level_ray_frac)))
        counts = {l: (n_rays if l == sup[-1] else low_rays) for l in sup}
        segs = [level_feats[l].reshape(n_rays, cfg.n_samples, -1)[:counts[l]].reshape(-1, cfg.channels)
                for l in sup]
        encs = [enc[:counts[l]].reshape(-1, enc.shape[-1]) for l in sup]
        rgb, sigma = net(torch.cat(segs, dim=0), torch.cat(encs, dim=0))

        gt = bank.colors[idx]
        total = torch.zeros(())
        comps = {}
        pos = 0
        for level in sup:
            k = counts[level]
            n = k * cfg.n_samples
            color, _, _ = composite(rgb[pos:pos + n].reshape(k, cfg.n_samples, 3),
                                    sigma[pos:pos + n].reshape(k, cfg.n_samples),
                                    deltas[:k])
            pos += n
            res = noisy[level]
            scale = 1.0
            if cfg.rate_subsample and res.numel() > cfg.rate_subsample:
                flat = res.reshape(-1)
                sub = torch.randint(flat.numel(), (cfg.rate_subsample,), generator=gen)
                scale = flat.numel() / cfg.rate_subsample
                res = flat[sub]
            if cfg.rate_mode == "per-element-bits":
                scale /= params[level - 1].numel()
            total, c = loss_level(level, color, gt[:k], res, models, qs[level - 1],
                                  total, alphas[level - 1], lam1, lam2, scale)
            comps[level] = c

        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        with torch.no_grad():
            for level in active:
                params[level - 1].clamp_(-clamp[level - 1], clamp[level - 1])

        if log_rows is not None:
            row = {"frame": frame_index, "iteration": it,
                   "loss": float(total.detach())}
            for level, c in comps.items():
                row[f"mse_l{level}"] = c["mse"]
                row[f"bits_l{level}"] = c["rate_bits"]
            log_rows.append(row)
        if iter_hook is not None:
            iter_hook(it, _StackView(params, ref_vals, bbox, frame_index))

    log.final_hashes = {li + 1: level_hash(params[li]) for li in range(L)}
    levels = [LevelGrid(li + 1, params[li].detach().clone(), bbox) for li in range(L)]
    stack = (HierarchicalField(frame_index, levels) if is_keyframe
             else ResidualSet(frame_index, levels))
    return stack, log


class _StackView:
    """Lazy view handed to iteration hooks: current reconstruction on demand."""

    def __init__(self, params, ref_vals, bbox, frame_index):
        self._params = params
        self._ref = ref_vals
        self._bbox = bbox
        self.frame_index = frame_index

    def reconstruction(self) -> HierarchicalField:
        levels = [LevelGrid(li + 1, (self._ref[li] + p.detach()).clone(), self._bbox)
                  for li, p in enumerate(self._params)]
        return HierarchicalField(self.frame_index, levels)


def _dequantized(stack: GridStack, qs: list[float]) -> list[torch.Tensor]:
    return [dequantize(quantize(lv, qs[li])).values for li, lv in enumerate(stack.levels)]


def encode_trained_gof(gof: GoF, net: DecoderNet, models: EntropyModel,
                       cfg: TrainConfig, gof_index: int = 0):
    """Bitstream of a trained GoF using the config's per-level step sizes."""
    from .container import encode_gof
    return encode_gof(gof, net, models, cfg.qs(), gof_index)


def train_gof(dataset: Dataset, cfg: TrainConfig,
              bbox: torch.Tensor | None = None,
              frames: Sequence[int] | None = None,
              log_rows: list | None = None,
              iter_hook: Callable | None = None):
    """Train a whole GoF: keyframe first, then each frame against the
    dequantized reconstruction of its predecessor.

    Returns (gof, decoder net, entropy models, per-frame event logs).
    """
    cfg.validate()
    if bbox is None:
        bbox = make_bbox((-1, -1, -1), (1, 1, 1))
    if frames is None:
        frames = list(range(min(cfg.gof_length, dataset.n_frames)))
    qs = cfg.qs()
    cams = [dataset.cameras[i] for i in dataset.train_ids]
    net = DecoderNet(cfg.channels, cfg.hidden, cfg.n_freqs)
    models = EntropyModel(cfg.n_levels)
    logs = []

    t0 = frames[0]
    images = [dataset.images[(t0, ci)] for ci in dataset.train_ids]
    key, log = train_frame(images, cams, None, cfg, net, models, t0,
                           is_keyframe=True, bbox=bbox, log_rows=log_rows,
                           iter_hook=iter_hook)
    logs.append(log)
    recon = _dequantized(key, qs)
    residuals = []
    for t in frames[1:]:
        ref = ReferenceBuffer(HierarchicalField(
            t - 1, [LevelGrid(li + 1, v, bbox) for li, v in enumerate(recon)]))
        images = [dataset.images[(t, ci)] for ci in dataset.train_ids]
        res, log = train_frame(images, cams, ref, cfg, net, models, t,
                               bbox=bbox, log_rows=log_rows, iter_hook=iter_hook)
        logs.append(log)
        residuals.append(res)
        dq = _dequantized(res, qs)
        recon = [r + d for r, d in zip(recon, dq)]
    return GoF(t0, key, residuals), net, models, logs
