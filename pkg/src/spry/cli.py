"""Command-line entry point: ``spry {synth,pretrain,finetune,render,eval}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (SphereSceneSpec, load_scene, make_synthetic_scene, normalize_scene, random_sphere_spec,
                   save_scene, write_depth, write_image)
from .errors import SpryError
from .field import FieldConfig
from .renderer import RenderConfig
from .trainer import (CHECKPOINT_NAME, REPORT_NAME, Model, TrainConfig, evaluate, finetune, input_view_indices,
                      load_model, pretrain, render_view)

log = logging.getLogger("spry")

CONFIG_NAME = "config.ini"
SECTIONS = {"field": FieldConfig, "render": RenderConfig, "train": TrainConfig}


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    render: RenderConfig = dataclasses.field(default_factory=RenderConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)


def _parse_value(kind, text, where):
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "float | None":
            return None if text.lower() in ("", "none") else float(text)
        if kind == "tuple":
            return tuple(float(x) for x in text.split(","))
        return text
    except ValueError:
        raise UsageError(f"{where}: cannot parse {text!r} as {kind}") from None


def _format_value(value):
    if isinstance(value, tuple):
        return ", ".join(repr(float(x)) for x in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def resolve_config(path=None, overrides=(), stage="pretrain"):
    """Merge defaults, an INI file and ``section.key=value`` overrides."""
    values = {name: {} for name in SECTIONS}
    if stage == "finetune":
        values["train"].update(stage="finetune", iterations=2000, ramp_iters=200, eval_every=250)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        parser.read(path)
        for section in parser.sections():
            for key, text in parser.items(section):
                _set(values, section, key, text, f"{path}[{section}]")
    for item in overrides:
        dotted, sep, text = item.partition("=")
        section, dot, key = dotted.partition(".")
        if not sep or not dot:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        _set(values, section, key, text, f"--set {item}")
    try:
        return RunConfig(**{name: cls(**values[name]) for name, cls in SECTIONS.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _set(values, section, key, text, where):
    cls = SECTIONS.get(section)
    if cls is None:
        raise UsageError(f"{where}: unknown section {section!r} (known: {sorted(SECTIONS)})")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise UsageError(f"{where}: unknown key {section}.{key}")
    values[section][key] = _parse_value(fields[key].type, text, where)


def write_config(config, path):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        section = getattr(config, name)
        parser[name] = {f.name: _format_value(getattr(section, f.name)) for f in dataclasses.fields(section)}
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def _config_help():
    lines = ["configuration keys (INI sections; override with --set section.key=value):"]
    for name, cls in SECTIONS.items():
        default = cls()
        for f in dataclasses.fields(cls):
            lines.append(f"  {name}.{f.name} = {_format_value(getattr(default, f.name))}")
    return "\n".join(lines)


# -- helpers ----------------------------------------------------------------

def _require_dir(path, what):
    p = Path(path)
    if not (p / "scene.json").is_file():
        raise UsageError(f"{what} not found or missing scene.json: {p}")
    return p


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _prepare_out(out_dir, config=None):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if config is not None:
        write_config(config, out / CONFIG_NAME)
    return out


def format_table(results):
    """Comparison table: PSNR and CD columns per view count."""
    counts = [r.view_count for r in results]
    head = ["", *[f"PSNR {c}-view" for c in counts], *[f"CD {c}-view" for c in counts]]
    row = ["model", *[f"{r.psnr:.3f}" for r in results],
           *["absent" if r.chamfer is None else f"{r.chamfer:.4f}" for r in results]]
    widths = [max(len(a), len(b)) for a, b in zip(head, row)]
    fmt = " | ".join(f"{{:>{w}}}" for w in widths)
    return "\n".join([fmt.format(*head), "-+-".join("-" * w for w in widths), fmt.format(*row)])


# -- commands -----------------------------------------------------------------

def cmd_synth(args):
    if args.spec:
        spec = SphereSceneSpec.from_dict(json.loads(_require_file(args.spec, "spec file").read_text()))
    elif args.random:
        spec = random_sphere_spec(args.seed)
    else:
        spec = SphereSceneSpec()
    overrides = {k: v for k, v in (("n_views", args.n_views), ("image_size", args.image_size)) if v is not None}
    if overrides:
        spec = dataclasses.replace(spec, **overrides).validate()
    out = Path(args.out)
    scene = make_synthetic_scene(spec, args.seed, name=out.name)
    save_scene(scene, out)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    log.info("wrote %d-view scene to %s", len(scene.frames), out)
    return 0


def cmd_pretrain(args):
    config = resolve_config(args.config, args.set, "pretrain")
    dirs = [_require_dir(d, "scene directory") for d in args.scenes]
    eval_dir = _require_dir(args.eval_scene, "eval scene directory") if args.eval_scene else None
    resume = _require_file(args.resume, "checkpoint") if args.resume else None
    scenes = [load_scene(d) for d in dirs]
    eval_scene = load_scene(eval_dir) if eval_dir else None
    out = _prepare_out(args.out, config)
    model = load_model(resume) if resume else Model.create(config.field, config.train.seed)
    if resume and model.config != config.field:
        log.warning("checkpoint field architecture overrides [field] settings")
    model, report = pretrain(scenes, config.train, model, render_config=config.render, out_dir=out,
                             eval_scene=eval_scene)
    log.info("pretrained to iteration %d; checkpoint %s", model.iteration, out / CHECKPOINT_NAME)
    return 0


def cmd_finetune(args):
    config = resolve_config(args.config, args.set, "finetune")
    overrides = {}
    if args.views is not None:
        overrides["views"] = args.views
    if args.freeze is not None:
        overrides["freeze_policy"] = args.freeze
    if overrides:
        config.train = dataclasses.replace(config.train, **overrides)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    scene = load_scene(_require_dir(args.scene, "scene directory"))
    available = len(input_view_indices(len(scene.frames)))
    if config.train.views > available:
        raise UsageError(f"scene offers {available} input views, {config.train.views} requested")
    out = _prepare_out(args.out, config)
    model = load_model(ckpt)
    baseline = evaluate(model, normalize_scene(scene)[0], config.train.views, render_config=config.render)
    model, report = finetune(model, scene, config.train, config.render, out_dir=out)
    final = report.records[-1]["psnr"] if report.records else baseline.psnr
    log.info("%d-view fine-tune (%s): held-out PSNR %.3f -> %.3f", config.train.views,
             config.train.freeze_policy, baseline.psnr, final)
    return 0


def cmd_render(args):
    config = resolve_config(args.config, args.set, "finetune")
    model = load_model(_require_file(args.checkpoint, "checkpoint"))
    scene = normalize_scene(load_scene(_require_dir(args.scene, "scene directory")))[0]
    sources = input_view_indices(len(scene.frames))[:args.views]
    if len(sources) < args.views:
        raise UsageError(f"scene offers {len(sources)} input views, {args.views} requested")
    frames = [int(x) for x in args.frames.split(",")] if args.frames else list(range(len(scene.frames)))
    for i in frames:
        if not 0 <= i < len(scene.frames):
            raise UsageError(f"frame index {i} out of range (scene has {len(scene.frames)})")
    out = _prepare_out(args.out, config)
    fld = model.field([scene.frames[i].image for i in sources], [scene.frames[i].camera for i in sources])
    near, far = scene.bounds()
    for i in frames:
        frame = scene.frames[i]
        rgb, depth, _, cos_axis = render_view(fld, frame.camera, near, far, config.render)
        write_image(out / "images" / f"{i:03d}_rgb.png", rgb)
        write_depth(out / "images" / f"{i:03d}_depth.dpth", (depth * cos_axis).astype(np.float32))
        write_image(out / "images" / f"{i:03d}_compare.png", np.concatenate([frame.image, rgb], axis=1))
    log.info("rendered %d frames to %s", len(frames), out / "images")
    return 0


def cmd_eval(args):
    config = resolve_config(args.config, args.set, "finetune")
    model = load_model(_require_file(args.checkpoint, "checkpoint"))
    scene = normalize_scene(load_scene(_require_dir(args.scene, "scene directory")))[0]
    counts = [int(x) for x in args.views.split(",")]
    available = len(input_view_indices(len(scene.frames)))
    for c in counts:
        if c not in (1, 2, 3) or c > available:
            raise UsageError(f"view count {c} not available (1..{available})")
    out = _prepare_out(args.out, config)
    results = [evaluate(model, scene, c, render_config=config.render, with_geometry=scene.points is not None,
                        grid_res=config.train.grid_res, sigma_threshold=config.train.sigma_threshold)
               for c in counts]
    table = format_table(results)
    print(table)
    (out / "eval.txt").write_text(table + "\n")
    with open(out / "eval.jsonl", "w") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="spry", description="Sparse-view neural field reconstruction.",
                     epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("synth", help="write an analytic sphere scene")
    p.add_argument("--spec", help="JSON sphere-scene spec (default: built-in spec)")
    p.add_argument("--random", action="store_true", help="draw a random sphere arrangement from --seed")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-views", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain across scenes")
    with_config(p)
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--eval-scene")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on one scene")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--views", type=int, choices=(1, 2, 3))
    p.add_argument("--freeze", choices=("none", "freeze_encoder", "freeze_rendering"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("render", help="render frames of a scene")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--frames", help="comma-separated frame indices (default: all)")
    p.add_argument("--views", type=int, default=3, choices=(1, 2, 3))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR / Chamfer table per view count")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--views", default="1,2,3")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return 1
    except (SpryError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
