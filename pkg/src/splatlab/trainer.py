"""Training loop: Adam, warmup + cosine schedule, frame-distance curriculum, checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .fileio import append_jsonl, write_json
from .geometry import Camera, simple_camera
from .losses import AblationFlags, LossConfigError, LossWeights, TargetView, compose, total_loss
from .metrics import psnr, ssim
from .models import Extrapolator, TeacherOracle, build_student, student_lift, teacher_centers
from .rasterizer import render_tensor
from .scenes import SyntheticScene, ViewSet, generate_scene, render_ground_truth, sample_views
from .splat import GaussianCloud

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``dump`` holds the diagnostic record."""

    def __init__(self, msg, dump):
        super().__init__(msg)
        self.dump = dump


@dataclass
class TrainConfig:
    iters: int = 300000
    lr_init: float = 2e-4
    warmup_iters: int = 2000
    seed: int = 0
    deterministic: bool = True
    scene_seeds: list = field(default_factory=lambda: [0])
    image_size: int = 32
    n_context: int = 2
    n_inside: int = 1
    n_outside: int = 3
    d_min: float = 0.1
    d_max: float = 0.5
    resample_views: bool = True
    student: dict = field(default_factory=lambda: {"kind": "conv", "width": 16, "stages": 3})
    extrapolator_width: int = 16
    teacher: dict = field(default_factory=lambda: {"variant": "scaled_gt", "hidden_scale": 1.0})
    weights: LossWeights = field(default_factory=LossWeights)
    flags: AblationFlags = field(default_factory=AblationFlags)
    checkpoint_every: int = 500
    dtype: str = "float32"

    def validate(self) -> None:
        if self.iters < 0 or self.warmup_iters < 0:
            raise ConfigError("iters and warmup_iters must be non-negative")
        if self.iters > 0 and not self.iters > self.warmup_iters:
            raise ConfigError(f"iters ({self.iters}) must exceed warmup_iters ({self.warmup_iters})")
        if not self.lr_init > 0:
            raise ConfigError("lr_init must be positive")
        if self.n_context not in (1, 2):
            raise ConfigError("n_context must be 1 or 2")
        if self.d_min < 0 or self.d_max < self.d_min:
            raise ConfigError("curriculum needs 0 <= d_min <= d_max")
        if not self.scene_seeds:
            raise ConfigError("scene_seeds is empty")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        try:
            self.flags.validate()
        except LossConfigError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "weights" in d:
                d["weights"] = LossWeights(**d["weights"])
            if "flags" in d:
                d["flags"] = AblationFlags(**d["flags"])
            cfg = cls(**d)
        except (TypeError, LossConfigError) as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``lr_init`` then half-cosine decay to zero at ``iters``."""
    w, n, lr = config.warmup_iters, config.iters, config.lr_init
    if step < w:
        return lr * step / w
    if n <= w:
        return lr
    frac = min(1.0, (step - w) / (n - w))
    return lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def frame_distance_at(step: int, config: TrainConfig) -> float:
    if config.iters <= 1:
        return config.d_min
    return config.d_min + (config.d_max - config.d_min) * step / (config.iters - 1)


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def optimizer_step(params, grads, state: OptimizerState, lr: float,
                   beta1: float = BETA1, beta2: float = BETA2, eps: float = ADAM_EPS) -> bool:
    """Bias-corrected Adam update in place. Returns False (and changes nothing) on non-finite gradients."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    gs = []
    for p, g in zip(params, grads):
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient at step %d; update skipped", state.step)
            return False
        gs.append(g)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, gs)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return True


# data ----------------------------------------------------------------------

@dataclass
class Sample:
    scene: SyntheticScene
    views: ViewSet
    context_images: list
    target_images: list
    mu_t: list


class SampleCache:
    """Memoizes views, ground-truth renders and teacher centers per (scene, view seed, distance)."""

    def __init__(self, config: TrainConfig, teacher: TeacherOracle, scenes: dict | None = None):
        self.config = config
        self.teacher = teacher
        self.scenes = scenes or {}
        self._cache = {}

    def scene(self, seed) -> SyntheticScene:
        if seed not in self.scenes:
            self.scenes[seed] = generate_scene(seed)
        return self.scenes[seed]

    def get(self, scene_seed, view_seed, distance) -> Sample:
        key = (scene_seed, view_seed, round(float(distance), 12))
        if key not in self._cache:
            cfg = self.config
            scene = self.scene(scene_seed)
            views = sample_views(scene, view_seed, distance, cfg.image_size,
                                 n_inside=cfg.n_inside, n_outside=cfg.n_outside)
            ctx = [render_ground_truth(scene, c) for c in views.context]
            tgt = [render_ground_truth(scene, c)[0] for c in views.targets]
            mu_t = teacher_centers(self.teacher, scene, views.context[:cfg.n_context], ctx[:cfg.n_context])
            self._cache[key] = Sample(scene, views, [im for im, _ in ctx], tgt, mu_t)
        return self._cache[key]


def sample_for_step(cache: SampleCache, step: int) -> Sample:
    cfg = cache.config
    scene_seed = cfg.scene_seeds[step % len(cfg.scene_seeds)]
    view_seed = cfg.seed + step if cfg.resample_views else cfg.seed
    return cache.get(scene_seed, view_seed, frame_distance_at(step, cfg))


# model bundle --------------------------------------------------------------

@dataclass
class Models:
    student: object
    extrapolator: Extrapolator

    def parameters(self):
        return self.student.parameters() + self.extrapolator.parameters()

    def state_dict(self) -> dict:
        return {**self.student.state_dict("student/"), **self.extrapolator.state_dict("extrapolator/")}

    def load_state_dict(self, state: dict) -> None:
        self.student.load_state_dict(state, "student/")
        self.extrapolator.load_state_dict(state, "extrapolator/")


def build_models(config: TrainConfig, camera: Camera, image=None) -> Models:
    dt = np.dtype(config.dtype)
    student = build_student(config.student, camera, seed=config.seed, dtype=dt, image=image)
    g = Extrapolator(config.extrapolator_width, seed=config.seed + 1, dtype=dt)
    return Models(student, g)


def save_models(path, models: Models, config: TrainConfig, step: int) -> None:
    meta = {"iter": step, "config": config.to_dict(), "student": models.student.config(),
            "extrapolator": models.extrapolator.config()}
    ad.save_checkpoint(path, models.state_dict(), meta)


def load_models(path) -> tuple[Models, TrainConfig, dict]:
    arrays, meta = ad.load_checkpoint(path)
    if not meta or "config" not in meta:
        raise ad.CheckpointError("checkpoint carries no training config")
    cfg = TrainConfig.from_dict(meta["config"])
    n = cfg.image_size
    cam = simple_camera(n, n)
    models = build_models(cfg, cam)
    models.load_state_dict(arrays)
    return models, cfg, meta


# forward pass shared by training and evaluation -----------------------------

def predict(models: Models, images, cameras):
    """Lift every context view and concatenate the clouds."""
    lifts = [student_lift(models.student, im, cam) for im, cam in zip(images, cameras)]
    return lifts, GaussianCloud.concat([lf.cloud for lf in lifts])


def step_loss(models: Models, sample: Sample, config: TrainConfig):
    k = 1 if models.student.kind == "field" else config.n_context
    lifts, cloud = predict(models, sample.context_images[:k], sample.views.context[:k])
    dt = np.dtype(config.dtype)
    targets = []
    for cam, img in zip(sample.views.targets, sample.target_images):
        color, weight, _, _ = render_tensor(cloud, cam)
        targets.append(TargetView(color, weight, img.astype(dt)))
    mu_t = [m.astype(dt) for m in sample.mu_t[:k]]
    return total_loss([lf.mu_grid for lf in lifts], mu_t, targets, models.extrapolator, config.weights, config.flags)


@dataclass
class TrainResult:
    models: Models
    records: list
    checkpoints: list
    cache: SampleCache


def train(config: TrainConfig, scene_source=None, models: Models | None = None, out_dir=None,
          teacher: TeacherOracle | None = None) -> TrainResult:
    """Run the optimization; writes ``loss.jsonl`` and checkpoints under ``out_dir`` when given.

    ``scene_source`` maps scene seeds to prebuilt scenes (default: generated from the seeds).
    """
    config.validate()
    teacher = teacher or TeacherOracle.from_dict(config.teacher)
    cache = SampleCache(config, teacher, dict(scene_source or {}))
    if models is None:
        first = sample_for_step(cache, 0) if config.iters else None
        models = build_models(config, simple_camera(config.image_size, config.image_size),
                              None if first is None else first.context_images[0])
    params = models.parameters()
    state = OptimizerState.for_params(params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "loss.jsonl"
        log_path.write_text("")
    records, ckpts = [], []

    for step in range(config.iters):
        sample = sample_for_step(cache, step)
        for p in params:
            p.grad = None
        report = step_loss(models, sample, config)
        if not math.isfinite(report.total):
            dump = {"iter": step, "report": report.record(step), "lr": lr_at(step, config),
                    "param_norms": {p.name: float(np.linalg.norm(p.data)) for p in params}}
            if out is not None:
                write_json(out / "diverged.json", dump)
            raise TrainingDiverged(f"non-finite loss at iteration {step}", dump)
        report.graph.backward()
        optimizer_step(params, [p.grad for p in params], state, lr_at(step, config))
        rec = report.record(step)
        records.append(rec)
        if out is not None:
            append_jsonl(log_path, rec)
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                path = out / f"ckpt_{step + 1:06d}.bin"
                save_models(path, models, config, step + 1)
                ckpts.append(path)
    if out is not None:
        save_models(out / "final.bin", models, config, config.iters)
        ckpts.append(out / "final.bin")
    return TrainResult(models, records, ckpts, cache)


# evaluation helpers ------------------------------------------------------------

@dataclass
class ViewRender:
    raw: np.ndarray
    weight: np.ndarray
    depth: np.ndarray
    filled: np.ndarray
    composed: np.ndarray


def render_view(models: Models, images, context_cams, camera: Camera) -> ViewRender:
    """Render the student cloud from ``camera`` and compose with the extrapolator fill."""
    k = 1 if models.student.kind == "field" else len(images)
    _, cloud = predict(models, images[:k], context_cams[:k])
    color, weight, depth, _ = render_tensor(cloud.detach(), camera)
    filled = models.extrapolator.fill(color, weight)
    composed = compose(color, filled, weight)
    return ViewRender(color.numpy().astype(np.float64), weight.numpy().astype(np.float64),
                      depth.numpy().astype(np.float64), filled.numpy().astype(np.float64),
                      composed.numpy().astype(np.float64))


def view_report(render: ViewRender, target: np.ndarray) -> dict:
    return {
        "psnr_raw": psnr(np.clip(render.raw, 0, 1), target),
        "psnr": psnr(np.clip(render.composed, 0, 1), target),
        "ssim": ssim(np.clip(render.composed, 0, 1), target),
        "low_weight_fraction": float(np.mean(render.weight < 0.5)),
    }
