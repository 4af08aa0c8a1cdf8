"""Procedural scenes with analytic ground truth, view sampling and scene files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, Intrinsics, Pose, look_pose, project_points, rotation_from_axis_angle
from .metrics import ssim

KINDS = ("plane", "sphere", "box")
LIGHT_DIR = np.array([-0.3, -0.5, -0.8]) / np.linalg.norm([-0.3, -0.5, -0.8])
BACKGROUND = np.array([0.0, 0.0, 0.0])
INSIDE_COVERAGE = 0.95


class SceneError(ValueError):
    pass


@dataclass
class Texture:
    kind: str = "flat"            # "checker" | "flat"
    period: float = 1.0
    colors: tuple = ((0.8, 0.8, 0.8), (0.2, 0.2, 0.2))

    def shade(self, u, v) -> np.ndarray:
        c0 = np.asarray(self.colors[0], dtype=np.float64)
        if self.kind == "flat":
            return np.broadcast_to(c0, u.shape + (3,)).copy()
        c1 = np.asarray(self.colors[1], dtype=np.float64)
        parity = (np.floor(u / self.period) + np.floor(v / self.period)).astype(np.int64) % 2
        return np.where(parity[..., None] == 0, c0, c1)

    def to_dict(self):
        return {"kind": self.kind, "period": float(self.period), "colors": [list(map(float, c)) for c in self.colors]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["period"], tuple(tuple(c) for c in d["colors"]))


@dataclass
class Primitive:
    """``size``: plane -> (half_w, half_h); sphere -> (radius,); box -> (hx, hy, hz).

    ``R`` maps local to world axes; a plane's normal is its local z axis.
    """

    kind: str
    center: np.ndarray
    R: np.ndarray
    size: tuple
    texture: Texture

    def to_dict(self):
        return {
            "kind": self.kind,
            "pose": {"center": [float(v) for v in self.center], "R": [float(v) for v in np.ravel(self.R)]},
            "size": [float(v) for v in self.size],
            "texture": self.texture.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d["kind"] not in KINDS:
            raise SceneError(f"unknown primitive kind {d['kind']!r}")
        return cls(d["kind"], np.asarray(d["pose"]["center"], dtype=np.float64),
                   np.asarray(d["pose"]["R"], dtype=np.float64).reshape(3, 3), tuple(d["size"]),
                   Texture.from_dict(d["texture"]))

    def extreme_points(self) -> np.ndarray:
        """Points whose convex hull bounds the primitive."""
        if self.kind == "sphere":
            r = self.size[0]
            offs = np.array([[sx, sy, sz] for sx in (-r, r) for sy in (-r, r) for sz in (-r, r)])
            return self.center + offs
        if self.kind == "plane":
            hw, hh = self.size
            local = np.array([[sx * hw, sy * hh, 0.0] for sx in (-1, 1) for sy in (-1, 1)])
        else:
            hx, hy, hz = self.size
            local = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return self.center + local @ self.R.T

    def intersect(self, origin: np.ndarray, dirs: np.ndarray):
        """Ray hits for ``origin + t * dirs``. Returns ``(t, normal, uv)``; misses have t = inf."""
        n = len(dirs)
        t = np.full(n, np.inf)
        normal = np.zeros((n, 3))
        uv = np.zeros((n, 2))
        o = origin - self.center
        if self.kind == "plane":
            nz = self.R[:, 2]
            denom = dirs @ nz
            with np.errstate(divide="ignore", invalid="ignore"):
                tt = -(o @ nz) / denom
            p = o + tt[:, None] * dirs
            u, v = p @ self.R[:, 0], p @ self.R[:, 1]
            hit = (np.abs(denom) > 1e-12) & (tt > 0) & (np.abs(u) <= self.size[0]) & (np.abs(v) <= self.size[1])
            t[hit] = tt[hit]
            normal[hit] = nz
            uv[hit] = np.stack([u, v], axis=1)[hit]
        elif self.kind == "sphere":
            r = self.size[0]
            b = dirs @ o
            a = (dirs * dirs).sum(axis=1)
            c = o @ o - r * r
            disc = b * b - a * c
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = (-b - sq) / a
            t1 = (-b + sq) / a
            tt = np.where(t0 > 0, t0, t1)
            hit = ok & (tt > 0)
            t[hit] = tt[hit]
            p = o + tt[:, None] * dirs
            nrm = p / r
            normal[hit] = nrm[hit]
            lp = nrm @ self.R
            theta = np.arctan2(lp[:, 0], lp[:, 2]) * r
            phi = np.arcsin(np.clip(lp[:, 1], -1, 1)) * r
            uv[hit] = np.stack([theta, phi], axis=1)[hit]
        else:
            h = np.asarray(self.size, dtype=np.float64)
            ol = o @ self.R
            dl = dirs @ self.R
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dl
                t_lo = (-h - ol) * inv
                t_hi = (h - ol) * inv
            tmin = np.minimum(t_lo, t_hi)
            tmax = np.maximum(t_lo, t_hi)
            tmin = np.where(np.isnan(tmin), -np.inf, tmin)
            tmax = np.where(np.isnan(tmax), np.inf, tmax)
            t_enter = tmin.max(axis=1)
            t_exit = tmax.min(axis=1)
            axis = tmin.argmax(axis=1)
            hit = (t_enter <= t_exit) & (t_enter > 0)
            t[hit] = t_enter[hit]
            p = ol + t_enter[:, None] * dl
            sign = np.sign(p[np.arange(n), axis])
            nl = np.zeros((n, 3))
            nl[np.arange(n), axis] = sign
            normal[hit] = (nl @ self.R.T)[hit]
            other = np.array([[1, 2], [0, 2], [0, 1]])[axis]
            face_uv = np.stack([p[np.arange(n), other[:, 0]], p[np.arange(n), other[:, 1]]], axis=1)
            uv[hit] = face_uv[hit]
        return t, normal, uv


@dataclass
class SyntheticScene:
    primitives: list
    ambient: float = 0.5
    seed: int | None = None
    cameras: list = field(default_factory=list)

    def validate(self, cameras=None) -> None:
        if not self.primitives:
            raise SceneError("scene needs at least one primitive")
        for cam in cameras if cameras is not None else self.cameras:
            for p in self.primitives:
                z = cam.pose.apply(p.extreme_points())[:, 2]
                if z.min() <= cam.near:
                    raise SceneError(f"{p.kind} crosses the near plane of a camera")

    def to_dict(self):
        return {
            "seed": self.seed,
            "ambient": float(self.ambient),
            "primitives": [p.to_dict() for p in self.primitives],
            "cameras": [c.to_dict() for c in self.cameras],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([Primitive.from_dict(p) for p in d["primitives"]], d.get("ambient", 0.5), d.get("seed"),
                   [Camera.from_dict(c) for c in d.get("cameras", [])])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _random_rotation(rng, max_angle):
    axis = rng.normal(size=3)
    return rotation_from_axis_angle(axis, rng.uniform(-max_angle, max_angle))


def _random_colors(rng):
    c0 = rng.uniform(0.15, 0.95, 3)
    c1 = np.clip(1.0 - c0 + rng.uniform(-0.15, 0.15, 3), 0.05, 0.95)
    return (tuple(c0), tuple(c1))


def generate_scene(seed: int) -> SyntheticScene:
    """Backdrop plane plus 2-7 random primitives, deterministic from ``seed``.

    Everything sits at depth > 3 in front of the origin looking down +z.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    prims = [Primitive(
        "plane", np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(10.0, 12.0)]),
        _random_rotation(rng, 0.1), (10.0, 10.0),
        Texture("checker", rng.uniform(1.5, 2.5), _random_colors(rng)),
    )]
    for _ in range(n - 1):
        kind = KINDS[int(rng.integers(0, 3))]
        z = rng.uniform(3.5, 7.0)
        center = np.array([rng.uniform(-0.35, 0.35) * z, rng.uniform(-0.35, 0.35) * z, z])
        tex = Texture("checker", rng.uniform(0.6, 1.0), _random_colors(rng)) if rng.uniform() < 0.8 \
            else Texture("flat", 1.0, (tuple(rng.uniform(0.15, 0.95, 3)),) * 2)
        if kind == "sphere":
            size = (rng.uniform(0.4, 1.0),)
            R = _random_rotation(rng, np.pi)
        elif kind == "plane":
            size = (rng.uniform(0.5, 1.2), rng.uniform(0.5, 1.2))
            R = _random_rotation(rng, 0.6)
        else:
            size = tuple(rng.uniform(0.3, 0.8, 3))
            R = _random_rotation(rng, np.pi)
        prims.append(Primitive(kind, center, R, size, tex))
    scene = SyntheticScene(prims, float(rng.uniform(0.35, 0.6)), seed)
    scene.validate([Camera(Intrinsics(32, 32, 16, 16, 32, 32), Pose())])
    return scene


def cast_rays(scene: SyntheticScene, origin, dirs):
    """Nearest-hit color (shaded texture) and ray parameter for each direction."""
    best = np.full(len(dirs), np.inf)
    color = np.broadcast_to(BACKGROUND, (len(dirs), 3)).copy()
    for p in scene.primitives:
        t, normal, uv = p.intersect(origin, dirs)
        closer = t < best
        if not closer.any():
            continue
        best[closer] = t[closer]
        shade = scene.ambient + (1.0 - scene.ambient) * np.abs(normal[closer] @ LIGHT_DIR)
        color[closer] = p.texture.shade(uv[closer, 0], uv[closer, 1]) * shade[:, None]
    return color, best


def render_ground_truth(scene: SyntheticScene, camera: Camera, supersample: int = 3):
    """Ray-cast ``(image (H,W,3), depth (H,W))``.

    Depth is the exact camera-space z of the nearest hit through each pixel
    center (``far`` on a miss); the image averages ``supersample^2`` jittered-free
    sub-pixel samples.
    """
    H, W = camera.height, camera.width
    k = camera.intrinsics
    origin = camera.center
    Rt = camera.pose.R  # world->camera; rows are camera axes in world

    def dirs_for(px, py):
        d_cam = np.stack([(px - k.cx) / k.fx, (py - k.cy) / k.fy, np.ones_like(px)], axis=-1)
        return d_cam.reshape(-1, 3) @ Rt

    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    _, t = cast_rays(scene, origin, dirs_for(xs + 0.5, ys + 0.5))
    depth = np.minimum(t.reshape(H, W), camera.far)

    s = max(1, int(supersample))
    offs = (np.arange(s) + 0.5) / s
    acc = np.zeros((H, W, 3))
    for oy in offs:
        for ox in offs:
            c, _ = cast_rays(scene, origin, dirs_for(xs + ox, ys + oy))
            acc += c.reshape(H, W, 3)
    return acc / (s * s), depth


# view sampling ---------------------------------------------------------------

@dataclass
class ViewSet:
    context: list
    targets_inside: list
    targets_outside: list

    @property
    def targets(self):
        return list(self.targets_inside) + list(self.targets_outside)


def position_in_frustum(cam: Camera, point) -> bool:
    pix, z = project_points(cam, np.asarray(point, dtype=np.float64)[None])
    if not z[0] > 0:
        return False
    return bool(0 <= pix[0, 0] <= cam.width and 0 <= pix[0, 1] <= cam.height)


def reprojection_coverage(scene: SyntheticScene, target: Camera, contexts) -> float:
    """Fraction of target pixels whose surface point projects into some context image."""
    _, depth = render_ground_truth(scene, target, supersample=1)
    pts = target.center + target.rays_world() * depth[..., None]
    seen = np.zeros(depth.shape, dtype=bool)
    for c in contexts:
        pix, z = project_points(c, pts)
        seen |= (z > 0) & (pix[..., 0] >= 0) & (pix[..., 0] <= c.width) & (pix[..., 1] >= 0) & (pix[..., 1] <= c.height)
    return float(seen.mean())


def is_inside(scene: SyntheticScene, target: Camera, contexts) -> bool:
    """Target center inside a context frustum and >= 95% of its pixels reproject into the contexts."""
    if not any(position_in_frustum(c, target.center) for c in contexts):
        return False
    return reprojection_coverage(scene, target, contexts) >= INSIDE_COVERAGE


def _camera(intr, center, R_c2w, near, far):
    return Camera(intr, look_pose(center, R_c2w), near, far)


def sample_views(scene: SyntheticScene, seed: int, frame_distance: float, image_size: int = 32,
                 focal: float | None = None, near: float = 1.0, far: float = 100.0,
                 n_inside: int = 1, n_outside: int = 2) -> ViewSet:
    """Two context cameras ``frame_distance`` apart plus inside / outside targets.

    Inside targets move forward from the first context (so their centers sit
    inside its frustum) with a small lateral offset; outside targets yaw away
    until less than 95% of their pixels are seen by the contexts.
    """
    if frame_distance < 0:
        raise SceneError("frame_distance must be non-negative")
    rng = np.random.default_rng(seed)
    f = float(image_size if focal is None else focal)
    intr = Intrinsics(f, f, image_size / 2.0, image_size / 2.0, image_size, image_size)
    yaw1 = -0.04 * frame_distance
    ctx = [
        _camera(intr, np.zeros(3), np.eye(3), near, far),
        _camera(intr, np.array([frame_distance, 0.0, 0.0]), rotation_from_axis_angle([0, 1, 0], yaw1), near, far),
    ]

    inside = []
    for _ in range(n_inside):
        for attempt in range(50):
            shrink = 0.5 ** (attempt // 10)
            center = np.array([rng.uniform(0.0, 0.5) * frame_distance * shrink,
                               rng.uniform(-0.05, 0.05) * shrink, rng.uniform(0.2, 0.4)])
            R = rotation_from_axis_angle([0, 1, 0], rng.uniform(-0.03, 0.03) * shrink)
            cam = _camera(intr, center, R, near, far)
            if is_inside(scene, cam, ctx):
                inside.append(cam)
                break
        else:
            raise SceneError("could not place an inside target")

    outside = []
    for i in range(n_outside):
        sign = 1.0 if i % 2 == 0 else -1.0
        angle = rng.uniform(0.30, 0.45)
        for _ in range(50):
            R = rotation_from_axis_angle([0, 1, 0], sign * angle) @ rotation_from_axis_angle([1, 0, 0], rng.uniform(-0.08, 0.08))
            center = np.array([sign * rng.uniform(0.2, 0.6), rng.uniform(-0.1, 0.1), rng.uniform(-0.2, 0.2)])
            cam = _camera(intr, center, R, near, far)
            if not is_inside(scene, cam, ctx):
                outside.append(cam)
                break
            angle = min(angle + 0.05, 0.55)
        else:
            raise SceneError("could not place an outside target")

    views = ViewSet(ctx, inside, outside)
    scene.validate(ctx + inside + outside)
    return views


def best_ssim_context(targets, context_views, renderer):
    """Index of the context whose single-view render best matches each target (SSIM).

    ``targets``: list of ``(camera, image)``; ``renderer(context_index, camera) -> image``.
    Ties go to the lower index.
    """
    if not context_views:
        raise SceneError("need at least one context candidate")
    chosen = []
    for cam, image in targets:
        best_i, best_s = 0, -np.inf
        for i in range(len(context_views)):
            s = ssim(renderer(i, cam), image)
            if s > best_s:
                best_i, best_s = i, s
        chosen.append(best_i)
    return chosen
