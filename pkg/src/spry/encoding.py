"""Sinusoidal positional encoding with a coarse-to-fine frequency window.

Band ``k`` carries frequency ``2**k * pi`` and is scaled by a weight that
opens smoothly as the progress parameter ``alpha`` sweeps past ``k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class EncodingSchedule:
    bands: int = 10
    ramp_iters: int = 1000
    include_identity: bool = True

    def __post_init__(self):
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")
        if self.ramp_iters < 1:
            raise ValueError(f"ramp_iters must be >= 1, got {self.ramp_iters}")

    @property
    def dim(self):
        return 3 * (2 * self.bands + int(self.include_identity))


def encoded_dim(bands, include_identity=True):
    return 3 * (2 * bands + int(include_identity))


def alpha_at(schedule, iteration):
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return schedule.bands * min(1.0, iteration / schedule.ramp_iters)


def frequency_weight(k, alpha):
    s = alpha - k
    if s < 0:
        return 0.0
    if s >= 1:
        return 1.0
    # equals (1 - cos(pi*s)) / 2, written so s = 0, 1/2, 1 land exactly on 0, 1/2, 1
    return 0.5 * (1.0 + math.sin(math.pi * (s - 0.5)))


def band_weights(bands, alpha):
    """Weights of all bands as a float64 vector; ``alpha=None`` means fully open."""
    if alpha is None:
        return np.ones(bands)
    return np.array([frequency_weight(k, alpha) for k in range(bands)])


def encode(x, schedule, alpha):
    """Encode a single 3-vector. Layout: [x (if identity)] then, per band,
    per axis, the pair (cos, sin) scaled by the band weight."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    w = band_weights(schedule.bands, alpha)
    freqs = (2.0 ** np.arange(schedule.bands)) * np.pi
    arg = freqs[:, None] * x[None, :]
    pairs = np.stack([np.cos(arg), np.sin(arg)], axis=-1) * w[:, None, None]
    parts = [x] if schedule.include_identity else []
    parts.append(pairs.ravel())
    return np.concatenate(parts)


def encode_batch(x, bands, alpha=None, include_identity=True):
    """Torch version of :func:`encode` over (..., 3) inputs."""
    freqs = torch.as_tensor((2.0 ** np.arange(bands)) * np.pi, dtype=x.dtype)
    w = torch.as_tensor(band_weights(bands, alpha), dtype=x.dtype)
    arg = x[..., None, :] * freqs[:, None]
    pairs = torch.stack([torch.cos(arg), torch.sin(arg)], dim=-1) * w[:, None, None]
    flat = pairs.reshape(*x.shape[:-1], 6 * bands)
    if include_identity:
        return torch.cat([x, flat], dim=-1)
    return flat
