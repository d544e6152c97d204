"""Cross-scene pretraining and per-scene fine-tuning."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import normalize_scene
from .encoding import EncodingSchedule, alpha_at
from .errors import TrainingDivergence
from .field import ENCODER, MLP, FieldConfig, condition, init_params
from .geometry import generate_rays, pixel_grid
from .metrics import EvalResult, chamfer, extract_points, psnr
from .numerics import adam_step, forward_backward, load_checkpoint, save_checkpoint
from .renderer import RayBatch, RenderConfig, depth_loss, render_chunked, render_rays, rgb_loss, total_loss

FREEZE_POLICIES = ("none", "freeze_encoder", "freeze_rendering")
STAGES = ("pretrain", "finetune")
STAGE_LR = {"pretrain": 5e-4, "finetune": 1e-4}
ACTIVATIONS = ("silu", "relu", "softplus")
CHECKPOINT_NAME = "model.ckpt"
REPORT_NAME = "report.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    iterations: int = 20000
    rays_per_batch: int = 512
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_depth: float = 0.1
    depth_supervision: bool = True
    freeze_policy: str = "none"
    c2f: bool = True
    ramp_iters: int = 2000
    c2f_reset: bool = True
    seed: int = 0
    eval_every: int = 500
    views: int = 3
    max_source_views: int = 3
    grid_res: int = 64
    sigma_threshold: float = 50.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.iterations < 0 or self.rays_per_batch < 1:
            raise ValueError("iterations must be >= 0 and rays_per_batch >= 1")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"freeze_policy must be one of {FREEZE_POLICIES}, got {self.freeze_policy!r}")
        if self.views not in (1, 2, 3):
            raise ValueError(f"views must be 1, 2 or 3, got {self.views}")
        if self.eval_every < 1 or self.ramp_iters < 1:
            raise ValueError("eval_every and ramp_iters must be >= 1")

    @classmethod
    def finetune_defaults(cls, **kw):
        base = dict(stage="finetune", iterations=2000, ramp_iters=200, eval_every=250)
        base.update(kw)
        return cls(**base)

    @property
    def learning_rate(self):
        return STAGE_LR[self.stage] if self.lr is None else self.lr


@dataclass
class Model:
    config: FieldConfig
    params: object
    iteration: int = 0

    @classmethod
    def create(cls, config=None, seed=0):
        config = config or FieldConfig()
        return cls(config, init_params(config, seed), 0)

    def copy(self):
        return Model(self.config, self.params.copy(), self.iteration)

    def field(self, images, cameras, params=None):
        return condition(self.config, self.params.values() if params is None else params, images, cameras)

    def identical_to(self, other):
        return (self.config == other.config and self.iteration == other.iteration
                and self.params.identical_to(other.params))


def _meta(model):
    cfg = model.config
    return {
        "iteration": model.iteration,
        "field.feature_channels": cfg.feature_channels, "field.width": cfg.width, "field.depth": cfg.depth,
        "field.color_width": cfg.color_width, "field.pos_bands": cfg.pos_bands, "field.dir_bands": cfg.dir_bands,
        "field.include_identity": float(cfg.include_identity),
        "field.activation": float(ACTIVATIONS.index(cfg.activation)), "field.sigma_bias": cfg.sigma_bias,
    }


def save_model(model, path):
    return save_checkpoint(path, model.params, _meta(model))


def load_model(path):
    params, meta = load_checkpoint(path)
    cfg = FieldConfig(
        feature_channels=int(meta["field.feature_channels"]), width=int(meta["field.width"]),
        depth=int(meta["field.depth"]), color_width=int(meta["field.color_width"]),
        pos_bands=int(meta["field.pos_bands"]), dir_bands=int(meta["field.dir_bands"]),
        include_identity=bool(meta["field.include_identity"]),
        activation=ACTIVATIONS[int(meta["field.activation"])], sigma_bias=float(meta["field.sigma_bias"]),
    )
    return Model(cfg, params, int(meta["iteration"]))


def apply_freeze_policy(params, policy):
    if policy not in FREEZE_POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}")
    params.set_trainable(ENCODER, policy != "freeze_encoder")
    params.set_trainable(MLP, policy != "freeze_rendering")


def input_view_indices(n_frames, count=3):
    """Sparse input set: ``count`` views spread around the capture, nested so
    that the k-view track uses the first k entries."""
    count = min(count, n_frames)
    idx = []
    for x in np.round(np.linspace(0, n_frames, count, endpoint=False)).astype(int):
        if int(x) not in idx:
            idx.append(int(x))
    return idx


def heldout_view_indices(n_frames, count=3):
    inputs = set(input_view_indices(n_frames, count))
    return [i for i in range(n_frames) if i not in inputs]


@dataclass
class TrainBatch:
    images: list
    cameras: list
    rays: RayBatch
    rgb: torch.Tensor
    depth: torch.Tensor  # distance along the ray
    mask: torch.Tensor
    source_views: list
    target_view: int


def make_batch(scene, sources, target, n_rays, rng):
    frame = scene.frames[target]
    intr = frame.camera.intrinsics
    flat = rng.integers(0, intr.width * intr.height, size=n_rays)
    pixels = pixel_grid(intr)[flat]
    origins, dirs, cos_axis = generate_rays(frame.camera, pixels)
    near, far = scene.bounds()
    rgb = frame.image.reshape(-1, 3)[flat]
    if frame.depth is not None:
        z = frame.depth.reshape(-1)[flat].astype(np.float64)
        mask = frame.mask.reshape(-1)[flat]
    else:
        z = np.zeros(n_rays)
        mask = np.zeros(n_rays, dtype=bool)
    return TrainBatch(
        images=[scene.frames[i].image for i in sources],
        cameras=[scene.frames[i].camera for i in sources],
        rays=RayBatch(origins, dirs, near, far),
        rgb=torch.from_numpy(rgb), depth=torch.from_numpy(z / cos_axis), mask=torch.from_numpy(mask),
        source_views=[int(i) for i in sources], target_view=int(target),
    )


def train_step(model, batch, config, iteration, alpha=None, render_config=None, rng=None, scene_id=None):
    """One forward/backward/Adam cycle. Returns the LossBreakdown."""
    render_config = render_config or RenderConfig()
    use_depth = config.depth_supervision and bool(batch.mask.any())
    lam = config.lambda_depth if use_depth else 0.0

    def graph(values, b):
        fld = model.field(b.images, b.cameras, values)
        out = render_rays(b.rays, fld, render_config, alpha=alpha, rng=rng)
        l_rgb = rgb_loss(out.rgb, b.rgb)
        if b.mask.any():
            l_depth = depth_loss(out.depth, b.depth, b.mask)
        else:
            l_depth = torch.zeros((), dtype=torch.float64)
        if not use_depth:
            l_depth = l_depth.detach()
        return {"render.rgb": out.rgb, "render.depth": out.depth, "rgb_loss": l_rgb,
                "depth_loss": l_depth, "loss": l_rgb + lam * l_depth}

    try:
        outputs, grads = forward_backward(graph, batch, model.params)
    except TrainingDivergence as exc:
        raise TrainingDivergence(exc.op, iteration=iteration, scene=scene_id) from exc
    adam_step(model.params, grads, config.learning_rate, config.beta1, config.beta2, config.eps)
    model.iteration += 1
    return total_loss(outputs["rgb_loss"].detach(), outputs["depth_loss"].detach(), lam)


# -- evaluation -------------------------------------------------------------

def render_view(fld, camera, near, far, render_config=None, alpha=None):
    """Full-image render; returns (rgb HxWx3, ray depth HxW, acc HxW, cos-to-axis HxW)."""
    intr = camera.intrinsics
    origins, dirs, cos_axis = generate_rays(camera, pixel_grid(intr))
    out = render_chunked(RayBatch(origins, dirs, near, far), fld, render_config, alpha=alpha)
    shape = (intr.height, intr.width)
    return (out.rgb.numpy().reshape(*shape, 3), out.depth.numpy().reshape(shape),
            out.acc.numpy().reshape(shape), cos_axis.reshape(shape))


def evaluate(model, scene, view_count, targets=None, render_config=None, alpha=None,
             with_geometry=False, grid_res=64, sigma_threshold=50.0):
    """Condition on the first ``view_count`` input views and score held-out views."""
    sources = input_view_indices(len(scene.frames))[:view_count]
    targets = heldout_view_indices(len(scene.frames)) if targets is None else list(targets)
    fld = model.field([scene.frames[i].image for i in sources], [scene.frames[i].camera for i in sources])
    near, far = scene.bounds()
    result = EvalResult(view_count)
    sq_err, count = 0.0, 0
    for i in targets:
        frame = scene.frames[i]
        rgb, depth, _, cos_axis = render_view(fld, frame.camera, near, far, render_config, alpha)
        result.psnr_per_view.append(psnr(rgb, frame.image))
        if frame.depth is not None and frame.mask.any():
            gt = frame.depth.astype(np.float64) / cos_axis
            sq_err += float(((depth - gt)[frame.mask] ** 2).sum())
            count += int(frame.mask.sum())
    if count:
        result.depth_rmse = float(np.sqrt(sq_err / count))
    if with_geometry and scene.points is not None:
        with torch.no_grad():
            pts = extract_points(lambda p: fld.density(p, alpha), grid_res, sigma_threshold)
        result.chamfer = chamfer(pts, scene.points) if len(pts) else None
    return result


# -- reports ----------------------------------------------------------------

@dataclass
class TrainReport:
    stage: str
    freeze_policy: str
    view_count: int | None = None
    records: list = field(default_factory=list)
    views_read: dict = field(default_factory=dict)  # scene name -> sorted frame indices
    heldout_views: dict = field(default_factory=dict)
    checkpoint: str | None = None

    def add(self, record):
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("report records must increase in iteration")
        self.records.append(record)

    def leaked_views(self):
        """Frames read for training that were also reserved for evaluation."""
        return {name: sorted(set(self.views_read.get(name, [])) & set(held))
                for name, held in self.heldout_views.items()
                if set(self.views_read.get(name, [])) & set(held)}

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path

    @staticmethod
    def read_jsonl(path):
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


class _Accumulator:
    def __init__(self):
        self.rgb = self.depth = 0.0
        self.n = 0

    def add(self, losses):
        self.rgb += float(losses.rgb_loss)
        self.depth += float(losses.depth_loss)
        self.n += 1

    def flush(self):
        out = (self.rgb / max(self.n, 1), self.depth / max(self.n, 1))
        self.__init__()
        return out


def _record(report, scene_names, iteration, acc, started, eval_result=None):
    rgb, depth = acc.flush()
    rec = {
        "iteration": iteration, "stage": report.stage, "freeze_policy": report.freeze_policy,
        "view_count": report.view_count, "rgb_loss": rgb, "depth_loss": depth,
        "psnr": None if eval_result is None else eval_result.psnr,
        "depth_rmse": None if eval_result is None else eval_result.depth_rmse,
        "views_read": {n: sorted(report.views_read.get(n, [])) for n in scene_names},
        "wall_time": time.perf_counter() - started,
    }
    report.add(rec)
    return rec


def _schedule(model, config):
    return EncodingSchedule(model.config.pos_bands, config.ramp_iters, model.config.include_identity)


def _finish(model, report, out_dir):
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = save_model(model, out_dir / CHECKPOINT_NAME)
        report.checkpoint = str(ckpt)
        report.to_jsonl(out_dir / REPORT_NAME)
    return model, report


def pretrain(scenes, config, model=None, field_config=None, render_config=None, out_dir=None,
             eval_scene=None, eval_view_count=3):
    """Round-robin over scenes; each step conditions on 1..3 random source
    views and supervises rays from one disjoint target view.

    ``config.iterations`` is the total step count: a model that already ran
    some steps (a resumed checkpoint) continues numbering from there.
    """
    if not scenes:
        raise ValueError("pretraining needs at least one scene")
    if config.stage != "pretrain":
        config = replace(config, stage="pretrain")
    scenes = [normalize_scene(s)[0] for s in scenes]
    if eval_scene is not None:
        eval_scene = normalize_scene(eval_scene)[0]
    model = model if model is not None else Model.create(field_config, config.seed)
    apply_freeze_policy(model.params, config.freeze_policy)
    render_config = render_config or RenderConfig()
    schedule = _schedule(model, config)
    report = TrainReport("pretrain", config.freeze_policy)
    names = [s.name for s in scenes]
    acc = _Accumulator()
    started = time.perf_counter()
    while model.iteration < config.iterations:
        it = model.iteration
        rng = np.random.default_rng([config.seed, it])
        scene = scenes[it % len(scenes)]
        n = len(scene.frames)
        if n >= 2:
            n_src = int(rng.integers(1, min(config.max_source_views, n - 1) + 1))
            perm = rng.permutation(n)
            sources, target = perm[:n_src], int(perm[n_src])
        else:
            sources, target = [0], 0
        batch = make_batch(scene, sources, target, config.rays_per_batch, rng)
        report.views_read.setdefault(scene.name, set()).update([*batch.source_views, target])
        alpha = alpha_at(schedule, it) if config.c2f else None
        losses = train_step(model, batch, config, it, alpha, render_config, rng, scene.name)
        acc.add(losses)
        if model.iteration % config.eval_every == 0:
            result = None
            if eval_scene is not None:
                result = evaluate(model, eval_scene, eval_view_count, render_config=render_config,
                                  alpha=alpha_at(schedule, model.iteration) if config.c2f else None)
            _record(report, names, model.iteration, acc, started, result)
    report.views_read = {k: sorted(v) for k, v in report.views_read.items()}
    return _finish(model, report, out_dir)


def finetune(model, scene, config, render_config=None, out_dir=None):
    """Test-time optimization on the scene's sparse input views.

    Conditions on the first ``config.views`` input views and draws target
    rays from those same views; held-out views are only rendered for
    evaluation. Returns (new model, report); the input model is untouched.
    """
    if config.stage != "finetune":
        config = replace(config, stage="finetune")
    scene = normalize_scene(scene)[0]
    model = model.copy()
    start_iteration = model.iteration
    render_config = render_config or RenderConfig()
    sources = input_view_indices(len(scene.frames))[:config.views]
    if len(sources) < config.views:
        raise ValueError(f"scene has {len(scene.frames)} frames, cannot condition on {config.views} views")
    heldout = heldout_view_indices(len(scene.frames))
    report = TrainReport("finetune", config.freeze_policy, config.views,
                         heldout_views={scene.name: heldout})
    if config.iterations == 0:
        return _finish(model, report, out_dir)
    apply_freeze_policy(model.params, config.freeze_policy)
    schedule = _schedule(model, config)
    acc = _Accumulator()
    started = time.perf_counter()
    read = set()

    def alpha_for(local):
        if not config.c2f:
            return None
        return alpha_at(schedule, local if config.c2f_reset else start_iteration + local)

    for local in range(config.iterations):
        rng = np.random.default_rng([config.seed, local])
        target = sources[int(rng.integers(0, len(sources)))]
        batch = make_batch(scene, sources, target, config.rays_per_batch, rng)
        read.update([*batch.source_views, target])
        report.views_read = {scene.name: sorted(read)}
        losses = train_step(model, batch, config, local, alpha_for(local), render_config, rng, scene.name)
        acc.add(losses)
        if (local + 1) % config.eval_every == 0 or local + 1 == config.iterations:
            result = evaluate(model, scene, config.views, heldout, render_config, alpha_for(local + 1))
            _record(report, [scene.name], local + 1, acc, started, result)
    return _finish(model, report, out_dir)


def config_dict(config):
    return asdict(config)
