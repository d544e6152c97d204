"""Pinhole cameras, rays, projection and stratified sampling.

Conventions: camera frame is x-right, y-down, z-forward; poses are stored
camera-to-world; pixel centers sit at integer + 0.5.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import BehindCameraError, BoundsError

_MIN_DEPTH = 1e-8


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    @classmethod
    def from_fov(cls, width, height, fov_deg):
        """Square-pixel intrinsics with the given horizontal field of view."""
        f = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
        return cls(float(f), float(f), width / 2.0, height / 2.0, int(width), int(height))

    def scaled(self, factor):
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)), int(round(self.height * factor)))

    def as_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


def orthonormality_error(rotation):
    r = np.asarray(rotation, dtype=np.float64)
    return max(float(np.abs(r.T @ r - np.eye(3)).max()), abs(float(np.linalg.det(r)) - 1.0))


def orthonormalize(rotation):
    """Closest proper rotation in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(rotation, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        err = orthonormality_error(r)
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (error {err:.3g})")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix):
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), position)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def position(self):
        return self.translation

    def __eq__(self, other):
        return (isinstance(other, Pose) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose

    @property
    def position(self):
        return self.pose.translation


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if not (self.far > self.near > 0):
            raise ValueError(f"need far > near > 0, got near={self.near}, far={self.far}")
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")

    def at(self, t):
        return np.asarray(self.origin) + float(t) * np.asarray(self.direction)


@dataclass(frozen=True, eq=False)
class SamplePoints:
    t: np.ndarray
    delta: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, SamplePoints) and np.array_equal(self.t, other.t)
                and np.array_equal(self.delta, other.delta))

    __hash__ = None


def _check_pixel(intr, u, v):
    if not (0.0 <= u <= intr.width and 0.0 <= v <= intr.height):
        raise BoundsError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} image")


def generate_ray(camera, px, near=1e-3, far=1e3):
    """World-space ray through continuous pixel coordinate ``px = (u, v)``."""
    u, v = float(px[0]), float(px[1])
    intr = camera.intrinsics
    _check_pixel(intr, u, v)
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d = camera.pose.rotation @ d_cam
    return Ray(camera.pose.translation.copy(), d / np.linalg.norm(d), near, far)


def pixel_grid(intr):
    """(H*W, 2) pixel-center coordinates in row-major order."""
    v, u = np.meshgrid(np.arange(intr.height) + 0.5, np.arange(intr.width) + 0.5, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=-1)


def generate_rays(camera, pixels):
    """Batched :func:`generate_ray`: returns origins (R, 3), unit directions (R, 3)
    and the cosine between each ray and the optical axis (for z-to-distance)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    intr = camera.intrinsics
    u, v = pixels[:, 0], pixels[:, 1]
    if (u < 0).any() or (u > intr.width).any() or (v < 0).any() or (v > intr.height).any():
        raise BoundsError("pixel batch contains coordinates outside the image")
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    norm = np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_cam = d_cam / norm
    dirs = d_cam @ camera.pose.rotation.T
    origins = np.broadcast_to(camera.pose.translation, dirs.shape).copy()
    return origins, dirs, d_cam[:, 2].copy()


def world_to_camera(points, camera):
    p = np.asarray(points, dtype=np.float64)
    return (p - camera.pose.translation) @ camera.pose.rotation


def project(point, camera):
    """Project a world point; returns ((u, v), camera-frame depth)."""
    x, y, z = world_to_camera(np.asarray(point, dtype=np.float64).reshape(3), camera)
    if z <= _MIN_DEPTH:
        raise BehindCameraError(f"point at camera depth {z:.3g} is behind the camera")
    intr = camera.intrinsics
    return (intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy), float(z)


def project_points(points, camera):
    """Torch batched projection of (..., 3) world points.

    Returns uv (..., 2) and depth (...). Entries with depth <= 1e-8 get a
    placeholder uv and are flagged by the caller through ``depth``.
    """
    rot = torch.tensor(camera.pose.rotation, dtype=points.dtype)
    trans = torch.tensor(camera.pose.translation, dtype=points.dtype)
    p = (points - trans) @ rot
    z = p[..., 2]
    z_safe = torch.where(z > _MIN_DEPTH, z, torch.ones_like(z))
    intr = camera.intrinsics
    u = intr.fx * p[..., 0] / z_safe + intr.cx
    v = intr.fy * p[..., 1] / z_safe + intr.cy
    return torch.stack([u, v], dim=-1), z


def _check_sampling(near, far, n):
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    if not far > near:
        raise ValueError(f"need far > near, got near={near}, far={far}")


def stratified_t(near, far, n, n_rays=1, rng=None):
    """Bin midpoints (``rng is None``) or one uniform draw per bin.

    Returns t and delta of shape (n_rays, n); delta uses backward
    differences with t_0 = near.
    """
    _check_sampling(near, far, n)
    width = (far - near) / n
    lower = near + width * np.arange(n)
    if rng is None:
        t = np.broadcast_to(lower + 0.5 * width, (n_rays, n)).copy()
    else:
        # draws in (0, 1] keep every delta strictly positive
        t = lower + width * (1.0 - rng.random((n_rays, n)))
    prev = np.concatenate([np.full((n_rays, 1), float(near)), t[:, :-1]], axis=1)
    return t, t - prev


def sample_stratified(ray, n, jitter=False, rng_seed=0):
    rng = np.random.default_rng(rng_seed) if jitter else None
    t, delta = stratified_t(ray.near, ray.far, n, 1, rng)
    return SamplePoints(t[0], delta[0])
