"""Volume-rendering quadrature, compositing, expected depth and losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoding import alpha_at
from .errors import DegenerateBatchError
from .geometry import stratified_t
from .numerics import DTYPE


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 64
    background: tuple = (1.0, 1.0, 1.0)
    normalize_depth: bool = False
    chunk: int = 4096

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass
class RayBatch:
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3) unit
    near: float
    far: float

    def __len__(self):
        return len(self.origins)

    def subset(self, sl):
        return RayBatch(self.origins[sl], self.dirs[sl], self.near, self.far)


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (R, 3)
    depth: torch.Tensor  # (R,)
    acc: torch.Tensor  # (R,)
    weights: torch.Tensor  # (R, N)
    t: torch.Tensor  # (R, N)
    transmittance: torch.Tensor  # (R, N + 1)

    def detach(self):
        return RenderOutput(*(x.detach() for x in (self.rgb, self.depth, self.acc, self.weights,
                                                   self.t, self.transmittance)))


@dataclass
class LossBreakdown:
    rgb_loss: torch.Tensor
    depth_loss: torch.Tensor
    total: torch.Tensor
    lambda_depth: float

    def as_floats(self):
        return {"rgb_loss": float(self.rgb_loss), "depth_loss": float(self.depth_loss),
                "total": float(self.total), "lambda_depth": self.lambda_depth}


def compute_weights(sigma, delta):
    """Per-sample weights T_i * (1 - exp(-sigma_i * delta_i)) and the N+1
    transmittances (T_1 = 1, last entry is the residual transparency)."""
    sigma, delta = _t(sigma), _t(delta)
    if sigma.shape != delta.shape:
        raise ValueError(f"sigma {tuple(sigma.shape)} and delta {tuple(delta.shape)} differ in shape")
    if bool((sigma.detach() < 0).any()):
        raise ValueError("sigma must be non-negative")
    if bool((delta.detach() < 0).any()):
        raise ValueError("delta must be non-negative")
    tau = sigma * delta
    zero = torch.zeros_like(tau[..., :1])
    accum = torch.cat([zero, torch.cumsum(tau, dim=-1)], dim=-1)
    trans = torch.exp(-accum)
    weights = trans[..., :-1] * -torch.expm1(-tau)
    return weights, trans


def composite_rgb(weights, colors, background=(1.0, 1.0, 1.0)):
    weights, colors = _t(weights), _t(colors)
    bg = torch.as_tensor(background, dtype=weights.dtype)
    acc = weights.sum(dim=-1, keepdim=True)
    return (weights.unsqueeze(-1) * colors).sum(dim=-2) + (1.0 - acc) * bg


def expected_depth(weights, t, normalize=False):
    """Sum of w_i * t_i; optionally divided by the accumulated opacity."""
    weights, t = _t(weights), _t(t)
    d = (weights * t).sum(dim=-1)
    if normalize:
        d = d / weights.sum(dim=-1).clamp_min(1e-10)
    return d


def depth_loss(pred, gt, mask=None):
    """Mean squared depth error over rays whose mask is set."""
    pred, gt = _t(pred), _t(gt).to(DTYPE)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} differ in shape")
    mask = torch.ones_like(gt, dtype=torch.bool) if mask is None else _t(mask).to(torch.bool)
    count = int(mask.sum())
    if count == 0:
        raise DegenerateBatchError("depth loss over a batch with no valid rays")
    err = torch.where(mask, pred - gt, torch.zeros_like(pred))
    return (err * err).sum() / count


def rgb_loss(pred, gt):
    pred, gt = _t(pred), _t(gt).to(DTYPE)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} differ in shape")
    return ((pred - gt) ** 2).mean()


def total_loss(rgb_term, depth_term, lambda_depth):
    return LossBreakdown(rgb_term, depth_term, rgb_term + lambda_depth * depth_term, lambda_depth)


def render_rays(rays, field, config=None, schedule=None, iteration=None, alpha=None, rng=None):
    """Stratified sampling, field query, quadrature and compositing.

    ``field(points, dirs, alpha)`` returns (sigma (R, N), rgb (R, N, 3)).
    The encoding window is ``alpha`` if given, else ``alpha_at(schedule,
    iteration)`` when both are supplied, else fully open. ``rng`` (a numpy
    Generator) turns on jittered sampling.
    """
    config = config or RenderConfig()
    if alpha is None and schedule is not None and iteration is not None:
        alpha = alpha_at(schedule, iteration)
    t_np, delta_np = stratified_t(rays.near, rays.far, config.n_samples, len(rays), rng)
    t = torch.from_numpy(t_np)
    delta = torch.from_numpy(delta_np)
    origins = torch.tensor(np.asarray(rays.origins), dtype=DTYPE)
    dirs = torch.tensor(np.asarray(rays.dirs), dtype=DTYPE)
    points = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    sigma, colors = field(points, dirs, alpha)
    weights, trans = compute_weights(sigma, delta)
    rgb = composite_rgb(weights, colors, config.background)
    depth = expected_depth(weights, t, config.normalize_depth)
    return RenderOutput(rgb, depth, weights.sum(dim=-1), weights, t, trans)


def render_chunked(rays, field, config=None, alpha=None):
    """No-grad deterministic rendering of many rays in fixed-size chunks."""
    config = config or RenderConfig()
    outs = []
    with torch.no_grad():
        for start in range(0, len(rays), config.chunk):
            outs.append(render_rays(rays.subset(slice(start, start + config.chunk)), field, config,
                                    alpha=alpha))
    return RenderOutput(*(torch.cat([getattr(o, f) for o in outs]) for f in
                          ("rgb", "depth", "acc", "weights", "t", "transmittance")))
