"""``splatlab`` command line: gen-scene, train, render, eval, refine."""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import CheckpointError
from .fileio import append_jsonl, write_json, write_pfm, write_png
from .losses import LossConfigError
from .metrics import (
    MetricError,
    depth_metrics,
    map_pairs,
    ordinal_accuracy,
    pad_and_resize,
    pairs_to_json,
)
from .models import ModelError, TeacherOracle, refine_with_teacher, student_lift
from .scenes import SceneError, SyntheticScene, best_ssim_context, generate_scene, render_ground_truth, sample_views
from .trainer import ConfigError, TrainConfig, TrainingDiverged, load_models, render_view, train, view_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("splatlab")


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int | None
    out: str
    version: str

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "manifest.json", asdict(self))


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        r = subprocess.run(["git", "describe", "--always", "--tags", "--dirty"], capture_output=True, text=True,
                           cwd=Path(__file__).parent, timeout=5)
        if r.returncode == 0 and r.stdout.strip():
            return f"{__version__}+g{r.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _manifest(args, config=None, seed=None) -> Path:
    out = Path(args.out)
    RunManifest(args.command, config, seed, str(out), version_string()).write(out)
    return out


# scene directories -------------------------------------------------------------

def _roles(n_context, n_inside, n_outside) -> dict:
    ctx = list(range(n_context))
    inside = list(range(n_context, n_context + n_inside))
    outside = list(range(n_context + n_inside, n_context + n_inside + n_outside))
    return {"context": ctx, "inside": inside, "outside": outside}


def load_scene_dir(path) -> tuple[SyntheticScene, dict]:
    p = Path(path)
    scene_file = p / "scene.json" if p.is_dir() else p
    if not scene_file.exists():
        raise ConfigError(f"no scene file at {scene_file}")
    scene = SyntheticScene.load(scene_file)
    views_file = scene_file.parent / "views.json"
    roles = json.loads(views_file.read_text()) if views_file.exists() else _roles(len(scene.cameras), 0, 0)
    return scene, roles


def cmd_gen_scene(args) -> int:
    out = _manifest(args, seed=args.seed)
    scene = generate_scene(args.seed)
    views = sample_views(scene, args.seed, args.frame_distance, args.size)
    scene.cameras = list(views.context) + list(views.targets)
    scene.save(out / "scene.json")
    write_json(out / "views.json", _roles(len(views.context), len(views.targets_inside), len(views.targets_outside)))
    for i, cam in enumerate(scene.cameras):
        img, depth = render_ground_truth(scene, cam)
        write_png(out / f"view_{i:02d}.png", img)
        write_pfm(out / f"depth_{i:02d}.pfm", depth)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    for flag, attr in (("no_teacher", "no_teacher"), ("no_grad_match", "no_grad_match"),
                       ("no_extrapolator", "no_extrapolation"), ("no_composition", "no_composition")):
        if getattr(args, flag):
            setattr(cfg.flags, attr, True)
    if args.deterministic:
        cfg.deterministic = True
    if args.iters is not None:
        cfg.iters = args.iters
    cfg.validate()
    out = _manifest(args, config=str(args.config), seed=cfg.seed)
    cfg.save(out / "config.json")
    train(cfg, out_dir=out)
    return EXIT_OK


def _context_inputs(scene: SyntheticScene, roles: dict):
    cams = [scene.cameras[i] for i in roles["context"]]
    imgs = [render_ground_truth(scene, c)[0] for c in cams]
    return cams, imgs


def cmd_render(args) -> int:
    out = _manifest(args)
    models, cfg, _ = load_models(args.ckpt)
    scene, roles = load_scene_dir(args.scene)
    if not 0 <= args.camera_index < len(scene.cameras):
        raise ConfigError(f"camera index {args.camera_index} out of range (scene has {len(scene.cameras)})")
    cams, imgs = _context_inputs(scene, roles)
    vr = render_view(models, imgs, cams, scene.cameras[args.camera_index])
    write_png(out / "composed.png", vr.composed)
    write_png(out / "raw.png", vr.raw)
    if args.show_weight:
        write_pfm(out / "weight.pfm", vr.weight)
        write_png(out / "weight_mask.png", (vr.weight >= 0.5).astype(np.float64))
    if args.show_depth:
        write_pfm(out / "depth.pfm", vr.depth)
    return EXIT_OK


def _scene_dirs(root) -> list[Path]:
    root = Path(root)
    dirs = sorted(p.parent for p in root.glob("*/scene.json"))
    if (root / "scene.json").exists():
        dirs.insert(0, root)
    if not dirs:
        raise ConfigError(f"no scenes under {root}")
    return dirs


def _ordinal_pairs(gt: np.ndarray, rng, n: int = 64) -> list:
    h, w = gt.shape
    pairs = []
    while len(pairs) < n:
        ax, bx = rng.integers(0, w, 2)
        ay, by = rng.integers(0, h, 2)
        da, db = gt[ay, ax], gt[by, bx]
        if da == db:
            continue
        pairs.append(((int(ax), int(ay)), (int(bx), int(by)), "a" if da < db else "b"))
    return pairs


def cmd_eval(args) -> int:
    out = _manifest(args)
    dirs = _scene_dirs(args.scenes)
    models = None if args.ckpt is None else load_models(args.ckpt)[0]
    if models is None and args.protocol != "depth":
        raise ConfigError("--ckpt is required for this protocol")
    records_path = out / f"{args.protocol}.jsonl"
    records_path.write_text("")
    records = []
    for d in dirs:
        scene, roles = load_scene_dir(d)
        cams, imgs = _context_inputs(scene, roles)
        if args.protocol == "extrapolation":
            ids = roles["inside"][:1] + roles["outside"][:2]
            targets = [(scene.cameras[i], render_ground_truth(scene, scene.cameras[i])[0]) for i in ids]
            # single-view model: each target uses the context that renders it best
            chosen = best_ssim_context(targets, cams, lambda k, cam: np.clip(
                render_view(models, [imgs[k]], [cams[k]], cam).composed, 0, 1))
            for vid, (cam, img), k in zip(ids, targets, chosen):
                rep = view_report(render_view(models, [imgs[k]], [cams[k]], cam), img)
                rec = {"scene": d.name, "view_id": vid, "context": int(k),
                       "split": "inside" if vid in roles["inside"] else "outside", **rep}
                records.append(rec)
                append_jsonl(records_path, rec)
            continue
        cam, img = cams[0], imgs[0]
        gt = render_ground_truth(scene, cam)[1]
        if models is None:
            pred = gt.copy()
        else:
            pred = student_lift(models.student, img, cam).depth.numpy().astype(np.float64)
        if args.protocol == "depth":
            mask = gt < cam.far
            res = depth_metrics(pred, gt, mask, median_scaling=True)
            rec = {"scene": d.name, "view_id": roles["context"][0], **res.to_dict()}
        else:
            rng = np.random.default_rng(scene.seed or 0)
            pairs = _ordinal_pairs(gt, rng)
            size = 256
            pred_sq, s = pad_and_resize(pred, size)
            rec = {"scene": d.name, "view_id": roles["context"][0],
                   "ordinal": ordinal_accuracy(pred_sq, map_pairs(pairs, s, size)), "pairs": len(pairs)}
            write_json(out / f"pairs_{d.name}.json", pairs_to_json(pairs))
        records.append(rec)
        append_jsonl(records_path, rec)
    keys = [k for k, v in records[0].items() if isinstance(v, float)]
    summary = {"protocol": args.protocol, "n": len(records),
               "mean": {k: float(np.mean([r[k] for r in records])) for k in keys}}
    write_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_refine(args) -> int:
    if args.shift == 0:
        raise ConfigError("--shift must be non-zero")
    out = _manifest(args)
    models, _, _ = load_models(args.ckpt)
    scene, roles = load_scene_dir(args.scene)
    cams, imgs = _context_inputs(scene, roles)
    cam, img = cams[0], imgs[0]
    refiner = TeacherOracle(variant="plane_sweep", n_hypotheses=args.hypotheses,
                            depth_range=(args.min_depth, args.max_depth))
    res = refine_with_teacher(models.student, img, cam, args.shift, refiner)
    gt = render_ground_truth(scene, cam)[1]
    mask = gt < cam.far
    before = depth_metrics(res.student_depth, gt, mask, median_scaling=True)
    after = depth_metrics(res.refined_depth, gt, mask, median_scaling=True)
    write_pfm(out / "student_depth.pfm", res.student_depth)
    write_pfm(out / "refined_depth.pfm", res.refined_depth)
    write_png(out / "shifted_render.png", res.rendered)
    write_json(out / "metrics.json", {
        "shift": args.shift, "before": before.to_dict(), "after": after.to_dict(),
        "delta": {"abs_rel": after.abs_rel - before.abs_rel, "delta1": after.delta1 - before.delta1},
    })
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatlab", description="Single-view Gaussian splatting lab.")
    p.add_argument("--version", action="version", version=f"splatlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a scene with ground-truth views")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--frame-distance", type=float, default=0.3)
    g.add_argument("--size", type=int, default=32)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="train student and extrapolator")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int)
    t.add_argument("--no-teacher", action="store_true")
    t.add_argument("--no-grad-match", action="store_true")
    t.add_argument("--no-extrapolator", action="store_true")
    t.add_argument("--no-composition", action="store_true")
    t.add_argument("--deterministic", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a scene camera from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--camera-index", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--show-weight", action="store_true")
    r.add_argument("--show-depth", action="store_true")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="run an evaluation protocol over scene directories")
    e.add_argument("--ckpt")
    e.add_argument("--scenes", required=True)
    e.add_argument("--protocol", choices=("extrapolation", "depth", "ordinal"), required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("refine", help="teacher refine with a forward-shifted virtual view")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--scene", required=True)
    f.add_argument("--shift", type=float, default=0.5)
    f.add_argument("--hypotheses", type=int, default=64)
    f.add_argument("--min-depth", type=float, default=2.0)
    f.add_argument("--max-depth", type=float, default=20.0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_refine)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, LossConfigError, ModelError, SceneError, MetricError, CheckpointError,
            FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
