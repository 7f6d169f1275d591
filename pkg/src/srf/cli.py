"""Command line entry point: ``srf <command> [options]``.

Commands: ``synth``, ``train``, ``finetune``, ``render``, ``eval``, ``mesh``.
Every command except ``synth`` writes below ``--out`` only::

    <out>/checkpoints/   model checkpoints
    <out>/renders/       PNG renders
    <out>/meshes/        PLY meshes
    <out>/logs/          metrics (JSON lines), reports, effective-config snapshots

Failures print one line ``error: <category>: <message>`` on stderr and exit
with the category's code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .config import Config, ConfigError, describe_keys, load_config
from .metrics import PSNR_CAP, psnr, ssim

logger = logging.getLogger("srf")

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "config": 3,
    "checkpoint-not-found": 4,
    "checkpoint-invalid": 5,
    "scene": 6,
    "numerical": 7,
    "io": 8,
    "mesh": 9,
}


class CommandError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _dirs(out) -> dict:
    root = Path(out)
    return {name: root / name for name in ("checkpoints", "renders", "meshes", "logs")}


def _snapshot(cfg: Config, out: Path, command: str, extra: dict = None) -> Path:
    """Write the effective configuration (plus command arguments) for this run."""
    logs = _dirs(out)["logs"]
    logs.mkdir(parents=True, exist_ok=True)
    text = cfg.dumps()
    if extra:
        text = "".join(f"# {k} = {v}\n" for k, v in sorted(extra.items())) + text
    path = logs / f"{command}-config.ini"
    path.write_text(text)
    logger.info("effective config (%s):\n%s", path, text.rstrip())
    return path


def _load_checkpoint(path):
    from .trainer import Checkpoint

    if path is None:
        raise CommandError("usage", "--ckpt is required")
    p = Path(path)
    if not p.is_file():
        raise CommandError("checkpoint-not-found", f"checkpoint not found: {p}")
    try:
        return Checkpoint.load(p)
    except (CheckpointError, ValueError, KeyError) as exc:
        raise CommandError("checkpoint-invalid", str(exc)) from None


def _load_scene(path, ckpt=None):
    from .scenegen import load_scene

    if path is None:
        if ckpt is not None and ckpt.config.train.scenes:
            path = ckpt.config.train.scenes[0]
        else:
            raise CommandError("usage", "--scene is required")
    return load_scene(path)


def _select_views(scene, split: str, names=None) -> list:
    if names:
        by_name = {v.name: i for i, v in enumerate(scene.views)}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise CommandError("scene", f"unknown view(s) {missing} in scene {scene.name}")
        return [by_name[n] for n in names]
    views = scene.indices(split)
    if not views:
        raise CommandError("scene", f"scene {scene.name} has no {split!r} views")
    return views


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: Config) -> int:
    from .scenegen import generate_scene, load_spec

    spec = load_spec(args.spec, args.seed)
    out = Path(args.out)
    manifest = generate_scene(spec, out)
    _snapshot(cfg, out, "synth", {"spec": args.spec, "seed": spec.seed})
    print(manifest)
    return 0


def cmd_train(args, cfg: Config) -> int:
    from .trainer import train

    if args.scene:
        cfg.train.scenes = tuple(str(Path(s)) for s in args.scene)
    if not cfg.train.scenes:
        raise CommandError("usage", "no training scenes: pass --scene or set train.scenes")
    resume = _load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    d = _dirs(out)
    _snapshot(cfg, out, "train", {"resume": args.resume})
    ckpt_path = d["checkpoints"] / "model.bin"
    result = train(cfg, resume=resume, log_path=d["logs"] / "train.jsonl", checkpoint_path=ckpt_path)
    if result.best is not None:
        result.best.save(d["checkpoints"] / "best.bin")
    print(ckpt_path)
    return 0


def cmd_finetune(args, cfg: Config) -> int:
    from .trainer import finetune

    ckpt = _load_checkpoint(args.ckpt)
    scene = _load_scene(args.scene, ckpt)
    f = cfg.finetune
    if f.steps < 0 or f.seconds < 0:
        raise CommandError("config", "finetune budget must be non-negative")
    out = Path(args.out)
    d = _dirs(out)
    _snapshot(cfg, out, "finetune", {"ckpt": args.ckpt, "scene": args.scene})
    tuned = finetune(ckpt, scene, f.steps, f.seconds, f.lr, f.rays_per_batch, f.n_bins, f.seed,
                     log_path=d["logs"] / "finetune.jsonl")
    path = d["checkpoints"] / "finetuned.bin"
    tuned.save(path)
    print(path)
    return 0


def cmd_render(args, cfg: Config) -> int:
    from .renderer import render_image, to_uint8
    from .scenegen import save_png
    from . import tensor as T

    ckpt = _load_checkpoint(args.ckpt)
    scene = _load_scene(args.scene, ckpt)
    out = Path(args.out)
    d = _dirs(out)
    _snapshot(cfg, out, "render", {"ckpt": args.ckpt, "scene": args.scene, "split": args.split})
    model = ckpt.model()
    cond = scene.conditioning()
    with T.no_grad():
        pyramid = model.encode(cond)
    d["renders"].mkdir(parents=True, exist_ok=True)
    for i in _select_views(scene, args.split, args.view):
        view = scene.views[i]
        img = render_image(model, cond, view.camera, scene.t_near, scene.t_far, cfg.render.n_bins,
                           cfg.render.batch_size, pyramid=pyramid)
        path = d["renders"] / f"{view.name}.png"
        save_png(path, to_uint8(img))
        print(path)
    return 0


def cmd_eval(args, cfg: Config) -> int:
    from .scenegen import load_png
    from .trainer import evaluate

    out = Path(args.out)
    if args.render or args.target:
        if not (args.render and args.target) or len(args.render) != len(args.target):
            raise CommandError("usage", "--render and --target must be given in matching numbers")
        report = {"views": [], "psnr": [], "ssim": []}
        for r, t in zip(args.render, args.target):
            try:
                a, b = load_png(r), load_png(t)
            except OSError as exc:
                raise CommandError("io", f"cannot read image: {exc}") from None
            report["views"].append(Path(t).stem)
            report["psnr"].append(psnr(a, b))
            report["ssim"].append(ssim(a, b))
        report["mean_psnr"] = float(np.mean(report["psnr"]))
        report["mean_ssim"] = float(np.mean(report["ssim"]))
    else:
        ckpt = _load_checkpoint(args.ckpt)
        scene = _load_scene(args.scene, ckpt)
        views = _select_views(scene, args.split, args.view)
        report = evaluate(ckpt.model(), scene, views, cfg.render.n_bins, cfg.render.batch_size)
    report["psnr_cap"] = PSNR_CAP
    _snapshot(cfg, out, "eval", {"ckpt": args.ckpt, "scene": args.scene})
    path = _dirs(out)["logs"] / "eval.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"mean_psnr": report["mean_psnr"], "mean_ssim": report["mean_ssim"],
                      "psnr": report["psnr"], "ssim": report["ssim"], "views": report["views"]}))
    return 0


def cmd_mesh(args, cfg: Config) -> int:
    from .mesher import extract_mesh, scene_bbox, write_ply

    ckpt = _load_checkpoint(args.ckpt)
    scene = _load_scene(args.scene, ckpt)
    m = cfg.mesh
    if m.bbox:
        if len(m.bbox) != 6:
            raise CommandError("config", "mesh.bbox needs six numbers: xmin, ymin, zmin, xmax, ymax, zmax")
        bbox = (np.array(m.bbox[:3]), np.array(m.bbox[3:]))
    else:
        bbox = scene_bbox([v.camera for v in scene.views], scene.t_near, scene.t_far)
    out = Path(args.out)
    d = _dirs(out)
    _snapshot(cfg, out, "mesh", {"ckpt": args.ckpt, "scene": args.scene})
    mesh, grid, level = extract_mesh(ckpt.model(), scene.conditioning(), bbox, m.resolution, m.threshold,
                                     m.threshold_ratio, m.batch_size)
    path = d["meshes"] / "mesh.ply"
    write_ply(path, mesh)
    logger.info("mesh: %d vertices, %d faces at threshold %.4g", mesh.n_vertices, mesh.n_faces, level)
    print(path)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "render": cmd_render,
    "eval": cmd_eval,
    "mesh": cmd_mesh,
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CommandError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    keys = "config keys (file sections or --set section.key=value):\n" + describe_keys()
    codes = "exit codes:\n" + "\n".join(f"  {v}  {k}" for k, v in EXIT_CODES.items())
    parser = _Parser(prog="srf", description="Stereo-feature view synthesis toolkit.",
                     epilog=codes, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"srf {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--threads", type=int, default=None, help="cap numeric worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              epilog=keys + "\n\n" + codes, formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("synth", "generate a synthetic multi-view scene")
    p.add_argument("--spec", required=True, help="preset name (sphere, two_primitives, empty, random) or .toy file")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--seed", type=int, default=None)

    p = add("train", "train a model on one or more scenes")
    p.add_argument("--scene", action="append", default=[], help="scene directory (repeatable)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--out", default="runs/train")

    p = add("finetune", "fine-tune a checkpoint on a scene's reference views")
    p.add_argument("--ckpt")
    p.add_argument("--scene")
    p.add_argument("--out", default="runs/finetune")

    p = add("render", "render views of a scene with a checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--scene")
    p.add_argument("--split", default="test")
    p.add_argument("--view", action="append", default=[], help="view name (repeatable; overrides --split)")
    p.add_argument("--out", default="runs/render")

    p = add("eval", "PSNR/SSIM of renders against targets, or of a checkpoint on held-out views")
    p.add_argument("--render", action="append", default=[], help="rendered PNG (repeatable)")
    p.add_argument("--target", action="append", default=[], help="target PNG (repeatable)")
    p.add_argument("--ckpt")
    p.add_argument("--scene")
    p.add_argument("--split", default="test")
    p.add_argument("--view", action="append", default=[])
    p.add_argument("--out", default="runs/eval")

    p = add("mesh", "extract a colored mesh from a checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--scene")
    p.add_argument("--out", default="runs/mesh")
    return parser


def _classify(exc: BaseException) -> str:
    from .mesher import MeshError
    from .scenegen import SceneError
    from .trainer import NumericalError
    from .geometry import CameraError

    if isinstance(exc, CommandError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint-invalid"
    if isinstance(exc, (SceneError, CameraError)):
        return "scene"
    if isinstance(exc, (NumericalError, FloatingPointError)):
        return "numerical"
    if isinstance(exc, MeshError):
        return "mesh"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CommandError("usage", f"a command is required: {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
        cfg = load_config(args.config, args.set)
        if args.threads is not None:
            if args.threads < 1:
                raise CommandError("usage", "--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return COMMANDS[args.command](args, cfg)
        return COMMANDS[args.command](args, cfg)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - mapped to a category and reported on one line
        category = _classify(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {category}: {message}", file=sys.stderr)
        if category == "internal":
            logger.debug("internal error", exc_info=True)
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
