"""Image-conditioned radiance field.

A small strided CNN turns each source image into a half-resolution feature
map. Query points are projected into every source camera, features are
bilinearly interpolated there, averaged over views, and fed together with
the encoded position into an MLP; the encoded view direction joins just
before the color head.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .encoding import encode_batch, encoded_dim
from .geometry import project_points
from .numerics import DTYPE, ParamStore

ENCODER = "encoder."
MLP = "mlp."

_ACTIVATIONS = {
    "silu": F.silu,
    "relu": F.relu,
    "softplus": F.softplus,
}


@dataclass(frozen=True)
class FieldConfig:
    feature_channels: int = 32
    width: int = 128
    depth: int = 6
    color_width: int = 64
    pos_bands: int = 10
    dir_bands: int = 4
    include_identity: bool = True
    activation: str = "silu"
    sigma_bias: float = 0.0

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(_ACTIVATIONS)}")
        if min(self.feature_channels, self.width, self.depth, self.color_width) < 1:
            raise ValueError("field dimensions must be positive")

    @property
    def pos_dim(self):
        return encoded_dim(self.pos_bands, self.include_identity)

    @property
    def dir_dim(self):
        return encoded_dim(self.dir_bands, self.include_identity)

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class FeatureVolume:
    features: torch.Tensor  # (H/2, W/2, C)
    camera: object

    @property
    def channels(self):
        return self.features.shape[-1]


@dataclass(frozen=True)
class FieldOutput:
    sigma: torch.Tensor
    rgb: torch.Tensor


def _uniform(rng, shape, fan_in, gain):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config, seed=0):
    """Fresh ParamStore; weights He-uniform, biases zero."""
    rng = np.random.default_rng(seed)
    ps = ParamStore()
    c = config.feature_channels
    for i, (cin, cout) in enumerate([(3, 16), (16, 32), (32, c)]):
        ps.add(f"{ENCODER}conv{i}.weight", _uniform(rng, (cout, cin, 3, 3), cin * 9, math.sqrt(2.0)))
        ps.add(f"{ENCODER}conv{i}.bias", np.zeros(cout))
    fan_in = config.pos_dim + c
    for i in range(config.depth):
        ps.add(f"{MLP}layer{i}.weight", _uniform(rng, (fan_in, config.width), fan_in, math.sqrt(2.0)))
        ps.add(f"{MLP}layer{i}.bias", np.zeros(config.width))
        fan_in = config.width
    ps.add(f"{MLP}sigma.weight", _uniform(rng, (config.width, 1), config.width, 1.0))
    ps.add(f"{MLP}sigma.bias", np.full(1, config.sigma_bias))
    cin = config.width + config.dir_dim
    ps.add(f"{MLP}color0.weight", _uniform(rng, (cin, config.color_width), cin, math.sqrt(2.0)))
    ps.add(f"{MLP}color0.bias", np.zeros(config.color_width))
    ps.add(f"{MLP}color1.weight", _uniform(rng, (config.color_width, 3), config.color_width, 1.0))
    ps.add(f"{MLP}color1.bias", np.zeros(3))
    return ps


def zero_params(config):
    ps = init_params(config)
    with torch.no_grad():
        for n in ps:
            ps[n].zero_()
    return ps


def _act(config):
    return _ACTIVATIONS[config.activation]


def encode_image(image, params, camera=None, config=None):
    """Run the encoder on an (H, W, 3) image; returns a FeatureVolume."""
    config = config or FieldConfig()
    img = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image, dtype=DTYPE)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"image must be HxWx3, got shape {tuple(img.shape)}")
    h, w = img.shape[:2]
    if h % 2 or w % 2 or h < 8 or w < 8:
        raise ValueError(f"image dims must be even and >= 8, got {h}x{w}")
    act = _act(config)
    x = img.permute(2, 0, 1).unsqueeze(0)
    x = act(F.conv2d(x, params[f"{ENCODER}conv0.weight"], params[f"{ENCODER}conv0.bias"], stride=2, padding=1))
    x = act(F.conv2d(x, params[f"{ENCODER}conv1.weight"], params[f"{ENCODER}conv1.bias"], padding=1))
    x = F.conv2d(x, params[f"{ENCODER}conv2.weight"], params[f"{ENCODER}conv2.bias"], padding=1)
    return FeatureVolume(x[0].permute(1, 2, 0), camera)


def sample_features(volume, points):
    """Pixel-aligned features for (..., 3) world points -> (..., C).

    Image-plane coordinates are halved to feature resolution and
    interpolated bilinearly between texel centers (clamped at the border).
    Points behind the camera or projecting outside the image get zeros.
    """
    fmap = volume.features
    fh, fw, c = fmap.shape
    intr = volume.camera.intrinsics
    shape = points.shape[:-1]
    pts = points.reshape(-1, 3)
    uv, z = project_points(pts, volume.camera)
    u, v = uv[:, 0], uv[:, 1]
    valid = (z > 1e-8) & (u >= 0) & (u <= intr.width) & (v >= 0) & (v <= intr.height)
    fx = (u * (fw / intr.width) - 0.5).clamp(0.0, fw - 1.0)
    fy = (v * (fh / intr.height) - 0.5).clamp(0.0, fh - 1.0)
    x0 = fx.detach().floor().clamp(max=fw - 2 if fw > 1 else 0).long()
    y0 = fy.detach().floor().clamp(max=fh - 2 if fh > 1 else 0).long()
    x1 = (x0 + 1).clamp(max=fw - 1)
    y1 = (y0 + 1).clamp(max=fh - 1)
    ax = (fx - x0.to(fx.dtype)).unsqueeze(-1)
    ay = (fy - y0.to(fy.dtype)).unsqueeze(-1)
    flat = fmap.reshape(-1, c)
    f00 = flat[y0 * fw + x0]
    f01 = flat[y0 * fw + x1]
    f10 = flat[y1 * fw + x0]
    f11 = flat[y1 * fw + x1]
    out = (f00 * (1 - ax) + f01 * ax) * (1 - ay) + (f10 * (1 - ax) + f11 * ax) * ay
    out = out * valid.unsqueeze(-1).to(out.dtype)
    return out.reshape(*shape, c)


def sample_feature(volume, query):
    """Single-point convenience wrapper around :func:`sample_features`."""
    q = torch.as_tensor(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return sample_features(volume, q)[0]


def aggregate_views(features):
    """Elementwise mean over a sequence of per-view feature tensors."""
    features = list(features)
    if not features:
        raise ValueError("aggregate_views needs at least one view")
    stacked = torch.stack([torch.as_tensor(f, dtype=DTYPE) for f in features])
    return stacked.mean(dim=0)


def query_field(x_encoded, d_encoded, feature, params, config=None):
    """MLP from (encoded position, feature, encoded direction) to density and color."""
    config = config or FieldConfig()
    if x_encoded.shape[-1] != config.pos_dim or d_encoded.shape[-1] != config.dir_dim:
        raise ValueError(f"encoding sizes ({x_encoded.shape[-1]}, {d_encoded.shape[-1]}) do not match "
                         f"configured ({config.pos_dim}, {config.dir_dim})")
    act = _act(config)
    h = torch.cat([x_encoded, feature], dim=-1)
    for i in range(config.depth):
        h = act(h @ params[f"{MLP}layer{i}.weight"] + params[f"{MLP}layer{i}.bias"])
    s = (h @ params[f"{MLP}sigma.weight"] + params[f"{MLP}sigma.bias"])[..., 0]
    hc = act(torch.cat([h, d_encoded], dim=-1) @ params[f"{MLP}color0.weight"] + params[f"{MLP}color0.bias"])
    c = hc @ params[f"{MLP}color1.weight"] + params[f"{MLP}color1.bias"]
    return FieldOutput(F.softplus(s), torch.sigmoid(c))


class ConditionedField:
    """Callable field for the renderer, bound to encoded source views."""

    def __init__(self, config, params, volumes):
        self.config = config
        self.params = params
        self.volumes = list(volumes)
        if not self.volumes:
            raise ValueError("at least one source view is required")

    def features(self, points):
        return aggregate_views(sample_features(vol, points) for vol in self.volumes)

    def __call__(self, points, dirs, alpha=None):
        cfg = self.config
        x_enc = encode_batch(points, cfg.pos_bands, alpha, cfg.include_identity)
        d_enc = encode_batch(dirs, cfg.dir_bands, None, cfg.include_identity)
        if d_enc.shape[:-1] != x_enc.shape[:-1]:
            d_enc = d_enc.unsqueeze(-2).expand(*x_enc.shape[:-1], d_enc.shape[-1])
        out = query_field(x_enc, d_enc, self.features(points), self.params, cfg)
        return out.sigma, out.rgb

    def density(self, points, alpha=None):
        cfg = self.config
        x_enc = encode_batch(points, cfg.pos_bands, alpha, cfg.include_identity)
        d_enc = torch.zeros(*points.shape[:-1], cfg.dir_dim, dtype=points.dtype)
        return query_field(x_enc, d_enc, self.features(points), self.params, cfg).sigma


def condition(config, params, images, cameras):
    """Encode source images and bind them into a :class:`ConditionedField`."""
    vols = [encode_image(img, params, cam, config) for img, cam in zip(images, cameras)]
    return ConditionedField(config, params, vols)
