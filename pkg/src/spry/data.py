"""Scenes: posed images with depth, disk I/O, normalization, and the
analytic sphere scenes used as ground truth."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import SceneLoadError
from .geometry import Camera, Intrinsics, Pose, generate_rays, orthonormality_error, orthonormalize, pixel_grid

FORMAT_VERSION = 1
DEPTH_MAGIC = b"DPTH"
POINTS_MAGIC = b"PNTS"


@dataclass(eq=False)
class Frame:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    camera: Camera
    depth: np.ndarray | None = None  # (H, W) float32 camera-frame z, 0 = invalid
    mask: np.ndarray | None = None  # (H, W) bool

    def __post_init__(self):
        h, w = self.image.shape[:2]
        intr = self.camera.intrinsics
        if (intr.width, intr.height) != (w, h):
            raise ValueError(f"image is {w}x{h} but intrinsics say {intr.width}x{intr.height}")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float32)
            if self.depth.shape != (h, w):
                raise ValueError(f"depth map shape {self.depth.shape} does not match image {h}x{w}")
            if self.mask is None:
                self.mask = self.depth > 0
            self.depth = np.where(self.mask, self.depth, np.float32(0.0)).astype(np.float32)
        elif self.mask is None:
            self.mask = np.zeros((h, w), dtype=bool)

    @property
    def has_depth(self):
        return self.depth is not None and bool(self.mask.any())


@dataclass(eq=False)
class Scene:
    frames: list
    points: np.ndarray | None = None  # (M, 3) float64
    transform: np.ndarray = field(default_factory=lambda: np.eye(4))
    name: str = "scene"

    def __post_init__(self):
        if self.points is not None:
            self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
            if len(self.points) == 0:
                raise ValueError("ground-truth point set is present but empty")

    @property
    def cameras(self):
        return [f.camera for f in self.frames]

    def bounds(self, object_radius=1.0):
        """Near/far covering a ball of ``object_radius`` about the origin
        from every camera (meaningful once the scene is normalized)."""
        dists = [float(np.linalg.norm(c.position)) for c in self.cameras]
        return max(0.05, min(dists) - object_radius), max(dists) + object_radius


# -- analytic sphere scenes -------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple


@dataclass(frozen=True)
class SphereSceneSpec:
    spheres: tuple = (Sphere((0.0, 0.0, 0.0), 0.5, (0.8, 0.3, 0.2)),)
    light_dir: tuple = (0.3, -0.5, 0.8)
    n_views: int = 8
    image_size: int = 64
    ring_radius: float = 3.0
    elevation_deg: float = 20.0
    fov_deg: float = 45.0
    n_points: int = 2000

    def validate(self):
        if not self.spheres:
            raise ValueError("spec needs at least one sphere")
        for s in self.spheres:
            if s.radius <= 0:
                raise ValueError(f"sphere radius must be positive, got {s.radius}")
        for i, a in enumerate(self.spheres):
            for b in self.spheres[i + 1:]:
                gap = np.linalg.norm(np.subtract(a.center, b.center)) - a.radius - b.radius
                if gap <= 0:
                    raise ValueError("spheres intersect")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.image_size < 8 or self.image_size % 2:
            raise ValueError("image_size must be even and >= 8")
        for cam in ring_cameras(self):
            for s in self.spheres:
                if np.linalg.norm(cam.position - np.asarray(s.center)) <= s.radius:
                    raise ValueError("camera placed inside a sphere")
        return self

    @property
    def light(self):
        v = np.asarray(self.light_dir, dtype=np.float64)
        return v / np.linalg.norm(v)

    def to_dict(self):
        return {
            "spheres": [{"center": list(s.center), "radius": s.radius, "albedo": list(s.albedo)}
                        for s in self.spheres],
            "light_dir": list(self.light_dir), "n_views": self.n_views, "image_size": self.image_size,
            "ring_radius": self.ring_radius, "elevation_deg": self.elevation_deg, "fov_deg": self.fov_deg,
            "n_points": self.n_points,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sphere-spec keys: {sorted(unknown)}")
        if "spheres" in d:
            d["spheres"] = tuple(Sphere(tuple(s["center"]), float(s["radius"]), tuple(s["albedo"]))
                                 for s in d["spheres"])
        for k in ("light_dir",):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()


def random_sphere_spec(seed, max_spheres=3, **overrides):
    """A random non-intersecting arrangement of 1..max_spheres spheres in
    the ball of radius 0.9."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, max_spheres + 1))
    spheres = []
    while len(spheres) < count:
        radius = float(rng.uniform(0.2, 0.45))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = direction * rng.uniform(0.0, 0.9 - radius) if spheres or count > 1 else np.zeros(3)
        ok = all(np.linalg.norm(center - np.asarray(s.center)) > radius + s.radius + 0.05 for s in spheres)
        if ok:
            albedo = tuple(float(a) for a in rng.uniform(0.2, 1.0, size=3))
            spheres.append(Sphere(tuple(float(c) for c in center), radius, albedo))
    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 0.5
    return SphereSceneSpec(spheres=tuple(spheres), light_dir=tuple(float(x) for x in light),
                           **overrides).validate()


def ring_cameras(spec):
    intr = Intrinsics.from_fov(spec.image_size, spec.image_size, spec.fov_deg)
    elev = np.deg2rad(spec.elevation_deg)
    cams = []
    for i in range(spec.n_views):
        az = 2.0 * np.pi * i / spec.n_views
        pos = spec.ring_radius * np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)])
        cams.append(Camera(intr, Pose.look_at(pos)))
    return cams


def ray_sphere_hits(origins, dirs, spheres):
    """Nearest positive hit distance per ray (inf on miss) and sphere index (-1)."""
    best = np.full(len(origins), np.inf)
    index = np.full(len(origins), -1)
    for i, s in enumerate(spheres):
        oc = origins - np.asarray(s.center)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - s.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > 0, t0, t1)
        hit = (disc >= 0) & (t > 0) & (t < best)
        best = np.where(hit, t, best)
        index = np.where(hit, i, index)
    return best, index


def shade(points, sphere_index, spheres, light):
    albedo = np.array([s.albedo for s in spheres], dtype=np.float64)
    centers = np.array([s.center for s in spheres], dtype=np.float64)
    normals = points - centers[sphere_index]
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    lambert = np.maximum(0.0, normals @ light)
    return albedo[sphere_index] * lambert[:, None]


def render_spheres(spec, camera):
    """Analytic image, z-depth (float32) and hit mask for one camera."""
    intr = camera.intrinsics
    origins, dirs, cos_axis = generate_rays(camera, pixel_grid(intr))
    t, idx = ray_sphere_hits(origins, dirs, spec.spheres)
    hit = idx >= 0
    image = np.ones((len(origins), 3))
    if hit.any():
        pts = origins[hit] + t[hit, None] * dirs[hit]
        image[hit] = shade(pts, idx[hit], spec.spheres, spec.light)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    depth = np.where(hit, t * cos_axis, 0.0).astype(np.float32)
    shape = (intr.height, intr.width)
    return image.reshape(*shape, 3), depth.reshape(shape), hit.reshape(shape)


def sample_sphere_points(spec, count, rng):
    areas = np.array([s.radius ** 2 for s in spec.spheres])
    owner = rng.choice(len(spec.spheres), size=count, p=areas / areas.sum())
    normals = rng.normal(size=(count, 3))
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    centers = np.array([s.center for s in spec.spheres])
    radii = np.array([s.radius for s in spec.spheres])
    pts = centers[owner] + radii[owner, None] * normals
    # keep values representable in the float32 point file
    return pts.astype(np.float32).astype(np.float64)


def make_synthetic_scene(spec, seed=0, name="synthetic"):
    spec.validate()
    rng = np.random.default_rng(seed)
    frames = []
    for cam in ring_cameras(spec):
        image, depth, mask = render_spheres(spec, cam)
        frames.append(Frame(image, cam, depth, mask))
    return Scene(frames, sample_sphere_points(spec, spec.n_points, rng), name=name)


class AnalyticField:
    """Piecewise-constant density (kappa inside any sphere) with colors
    shaded at the nearest sphere surface; a drop-in field for rendering."""

    def __init__(self, spec, kappa=1e3):
        self.spec = spec
        self.kappa = float(kappa)
        self.centers = torch.tensor([s.center for s in spec.spheres], dtype=torch.float64)
        self.radii = torch.tensor([s.radius for s in spec.spheres], dtype=torch.float64)
        self.albedo = torch.tensor([s.albedo for s in spec.spheres], dtype=torch.float64)
        self.light = torch.as_tensor(spec.light)

    def _nearest(self, points):
        offset = points[..., None, :] - self.centers  # (..., S, 3)
        dist = offset.norm(dim=-1)
        inside = (dist < self.radii).any(dim=-1)
        nearest = (dist - self.radii).abs().argmin(dim=-1)
        return offset, dist, inside, nearest

    def density(self, points, alpha=None):
        _, _, inside, _ = self._nearest(points)
        return torch.where(inside, self.kappa, 0.0).to(points.dtype)

    def __call__(self, points, dirs=None, alpha=None):
        offset, dist, inside, nearest = self._nearest(points)
        sigma = torch.where(inside, self.kappa, 0.0).to(points.dtype)
        idx = nearest[..., None, None].expand(*nearest.shape, 1, 3)
        normal = torch.gather(offset, -2, idx)[..., 0, :]
        normal = normal / normal.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        lambert = (normal @ self.light).clamp_min(0.0)
        rgb = self.albedo[nearest] * lambert[..., None]
        return sigma, rgb


def analytic_density(spec, kappa=1e3):
    return AnalyticField(spec, kappa)


# -- normalization ------------------------------------------------------------

def object_points(scene):
    """Points describing the object: GT points, else back-projected depth."""
    if scene.points is not None:
        return scene.points
    chunks = []
    for f in scene.frames:
        if f.depth is None or not f.mask.any():
            continue
        intr = f.camera.intrinsics
        pix = pixel_grid(intr)[f.mask.ravel()]
        origins, dirs, cos_axis = generate_rays(f.camera, pix)
        z = f.depth.ravel()[f.mask.ravel()].astype(np.float64)
        chunks.append(origins + (z / cos_axis)[:, None] * dirs)
    return np.concatenate(chunks) if chunks else None


def normalize_scene(scene, camera_radius=4.0):
    """Similarity-normalize: object bounding region centered and inside the
    unit ball, cameras within ``camera_radius``, with one constraint tight.

    Returns (normalized scene, 4x4 transform from input to output world).
    The canonical form makes the result invariant to a prior uniform scale.
    """
    if not scene.frames:
        raise ValueError("cannot normalize a scene without cameras")
    pts = object_points(scene)
    cams = np.array([c.position for c in scene.cameras])
    if pts is not None:
        center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        radius = float(np.linalg.norm(pts - center, axis=1).max())
    else:
        center, radius = np.zeros(3), 0.0
    cam_dist = float(np.linalg.norm(cams - center, axis=1).max())
    extent = max(radius, cam_dist / camera_radius)
    if extent <= 0:
        raise ValueError("scene has no spatial extent")
    s = 1.0 / extent
    transform = np.eye(4)
    transform[:3, :3] *= s
    transform[:3, 3] = -s * center
    frames = []
    for f in scene.frames:
        pose = Pose(f.camera.pose.rotation, s * (f.camera.pose.translation - center))
        depth = None if f.depth is None else (f.depth.astype(np.float64) * s).astype(np.float32)
        frames.append(Frame(f.image, Camera(f.camera.intrinsics, pose), depth, f.mask.copy()))
    points = None if scene.points is None else s * (scene.points - center)
    out = Scene(frames, points, transform @ scene.transform, scene.name)
    return out, transform


# -- disk formats -------------------------------------------------------------

def write_depth(path, depth):
    d = np.ascontiguousarray(np.asarray(depth, dtype="<f4"))
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", w, h) + d.tobytes())


def read_depth(path):
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC or len(raw) < 12:
        raise SceneLoadError(f"{path}: not a depth file")
    w, h = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * w * h:
        raise SceneLoadError(f"{path}: expected {w}x{h} floats, file size {len(raw)}")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(h, w).astype(np.float32)


def write_points(path, points):
    p = np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, 3))
    with open(path, "wb") as fh:
        fh.write(POINTS_MAGIC + struct.pack("<I", len(p)) + p.tobytes())


def read_points(path):
    raw = Path(path).read_bytes()
    if raw[:4] != POINTS_MAGIC or len(raw) < 8:
        raise SceneLoadError(f"{path}: not a point-set file")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + 12 * n:
        raise SceneLoadError(f"{path}: expected {n} points, file size {len(raw)}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(n, 3).astype(np.float64)


def write_image(path, image):
    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_scene(scene, directory):
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "depth").mkdir(exist_ok=True)
    intr = scene.frames[0].camera.intrinsics
    entries = []
    for i, f in enumerate(scene.frames):
        if f.camera.intrinsics != intr:
            raise ValueError("all frames of a saved scene must share intrinsics")
        image_rel = f"images/{i:03d}.png"
        write_image(directory / image_rel, f.image)
        depth_rel = None
        if f.depth is not None:
            depth_rel = f"depth/{i:03d}.dpth"
            write_depth(directory / depth_rel, f.depth)
        entries.append({"image": image_rel, "depth": depth_rel,
                        "transform": [float(x) for x in f.camera.pose.matrix().ravel()]})
    manifest = {"format_version": FORMAT_VERSION, "intrinsics": intr.as_dict(), "frames": entries}
    if scene.points is not None:
        write_points(directory / "points.pnts", scene.points)
        manifest["points"] = "points.pnts"
    (directory / "scene.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_scene(path):
    """Load a scene directory (or its ``scene.json``) and validate it."""
    path = Path(path)
    manifest_path = path / "scene.json" if path.is_dir() else path
    root = manifest_path.parent
    if not manifest_path.is_file():
        raise SceneLoadError(f"scene manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneLoadError(f"{manifest_path}: corrupt manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise SceneLoadError(f"{manifest_path}: unsupported format_version {manifest.get('format_version')!r}")
    try:
        intr = Intrinsics(**{k: manifest["intrinsics"][k] for k in ("fx", "fy", "cx", "cy", "width", "height")})
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneLoadError(f"{manifest_path}: bad intrinsics ({exc})") from exc
    frames = []
    for i, entry in enumerate(manifest.get("frames", [])):
        where = f"frame {i}"
        image_path = root / entry["image"]
        if not image_path.is_file():
            raise SceneLoadError(f"{where}: missing image {image_path}")
        try:
            image = read_image(image_path)
        except OSError as exc:
            raise SceneLoadError(f"{where}: unreadable image {image_path} ({exc})") from exc
        if image.shape[:2] != (intr.height, intr.width):
            raise SceneLoadError(f"{where}: image {image_path} is {image.shape[1]}x{image.shape[0]}, "
                                 f"expected {intr.width}x{intr.height}")
        m = np.asarray(entry["transform"], dtype=np.float64)
        if m.size != 16:
            raise SceneLoadError(f"{where}: transform must have 16 numbers")
        m = m.reshape(4, 4)
        err = orthonormality_error(m[:3, :3])
        if err > 1e-4:
            raise SceneLoadError(f"{where}: rotation not orthonormal (error {err:.3g})")
        if err > 1e-6:
            m[:3, :3] = orthonormalize(m[:3, :3])
        depth = None
        if entry.get("depth"):
            depth_path = root / entry["depth"]
            if not depth_path.is_file():
                raise SceneLoadError(f"{where}: missing depth {depth_path}")
            depth = read_depth(depth_path)
            if depth.shape != (intr.height, intr.width):
                raise SceneLoadError(f"{where}: depth {depth_path} has shape {depth.shape}, "
                                     f"expected {(intr.height, intr.width)}")
        frames.append(Frame(image, Camera(intr, Pose.from_matrix(m)), depth))
    if not frames:
        raise SceneLoadError(f"{manifest_path}: manifest lists no frames")
    points = None
    if manifest.get("points"):
        points_path = root / manifest["points"]
        if not points_path.is_file():
            raise SceneLoadError(f"missing point set {points_path}")
        points = read_points(points_path)
        if len(points) == 0:
            raise SceneLoadError(f"{points_path}: point set is empty")
    return Scene(frames, points, name=root.name)


def with_frames(scene, indices):
    return replace(scene, frames=[scene.frames[i] for i in indices])
