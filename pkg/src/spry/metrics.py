"""PSNR for images, surface-shell extraction and Chamfer distance for geometry."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

PSNR_CAP = 99.0


class EmptyGeometryWarning(UserWarning):
    pass


@dataclass
class EvalResult:
    view_count: int
    psnr_per_view: list = field(default_factory=list)
    chamfer: float | None = None
    depth_rmse: float | None = None

    @property
    def psnr(self):
        return float(np.mean(self.psnr_per_view)) if self.psnr_per_view else float("nan")

    def to_record(self):
        rec = asdict(self)
        rec["psnr"] = self.psnr
        return rec

    def to_json(self):
        return json.dumps(self.to_record(), sort_keys=True)


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def grid_centers(grid_res, bound=1.0):
    step = 2.0 * bound / grid_res
    axis = -bound + step * (np.arange(grid_res) + 0.5)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)


def extract_points(density, grid_res=64, sigma_threshold=50.0, bound=1.0, chunk=65536):
    """Centers of lattice cells at or above the threshold that touch a
    below-threshold 6-neighbor (cells outside the lattice count as empty).

    ``density`` maps a (P, 3) float64 tensor to (P,) densities.
    """
    if grid_res < 8:
        raise ValueError(f"grid_res must be >= 8, got {grid_res}")
    centers = grid_centers(grid_res, bound)
    flat = torch.from_numpy(centers.reshape(-1, 3))
    sigma = []
    with torch.no_grad():
        for start in range(0, len(flat), chunk):
            sigma.append(density(flat[start:start + chunk]).reshape(-1))
    occupied = (torch.cat(sigma).numpy() >= sigma_threshold).reshape((grid_res,) * 3)
    padded = np.pad(occupied, 1, constant_values=False)
    interior = np.ones_like(occupied)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    shell = occupied & ~interior
    pts = centers[shell]
    if len(pts) == 0:
        warnings.warn("no lattice cell reached the density threshold; geometry is empty",
                      EmptyGeometryWarning, stacklevel=2)
    return pts


def chamfer(a, b):
    """Symmetric mean nearest-neighbor Euclidean distance (exact NN)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(da)) + float(np.mean(db)))
