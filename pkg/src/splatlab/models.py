"""Student networks, the teacher oracle, the extrapolator and the refine pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Camera, shifted_pose, unproject
from .rasterizer import rasterize
from .scenes import SyntheticScene, render_ground_truth
from .splat import RAW_CHANNELS, GaussianCloud, LiftResult, lift_predictions, raw_from_values

DEFAULT_WIDTH = 16
DEFAULT_INIT_DEPTH = 5.0


class ModelError(ValueError):
    pass


class Module:
    """Named parameter container; parameters are leaf tensors with ``requires_grad``."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _param(self, name, value) -> Tensor:
        t = Tensor(np.asarray(value), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict:
        return {prefix + k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        for k, p in self.params.items():
            key = prefix + k
            if key not in state:
                raise ModelError(f"checkpoint is missing parameter {key!r}")
            arr = np.asarray(state[key])
            if arr.shape != p.shape:
                raise ModelError(f"parameter {key!r}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.grad = None

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self


def kaiming_uniform(rng, c_out, c_in, k, dtype):
    """Fan-in Kaiming-uniform kernel ``(c_out, c_in, k, k)``."""
    bound = np.sqrt(6.0 / (c_in * k * k))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)


class _ConvStack(Module):
    def __init__(self, seed, dtype):
        super().__init__()
        self._rng = np.random.default_rng(seed)
        self._dtype = dtype

    def _conv(self, name, c_in, c_out, k):
        self._param(name + ".w", kaiming_uniform(self._rng, c_out, c_in, k, self._dtype))
        self._param(name + ".b", np.zeros(c_out, dtype=self._dtype))

    def _apply(self, name, x, k=3):
        conv = ad.conv3x3 if k == 3 else ad.conv1x1
        return conv(x, self.params[name + ".w"], self.params[name + ".b"])


class StudentField(Module):
    """Free per-pixel raw parameters: the degenerate single-scene student."""

    kind = "field"

    def __init__(self, height: int, width: int, camera: Camera | None = None,
                 init_depth: float = DEFAULT_INIT_DEPTH, init_raw=None, image=None, dtype=np.float32):
        """With a ``camera`` the field starts as a plane at ``init_depth``; colors
        start from ``image`` when given, else mid-gray."""
        super().__init__()
        if init_raw is None:
            if camera is None:
                raw = np.zeros((height, width, RAW_CHANNELS))
                raw[..., 7] = 1.0
            else:
                color = np.full((height, width, 3), 0.5) if image is None else image
                raw = raw_from_values(np.full((height, width), init_depth), camera, alpha=0.9, scale_px=0.7,
                                      color=color)
        else:
            raw = np.asarray(init_raw)
        if raw.shape != (height, width, RAW_CHANNELS):
            raise ModelError(f"field shape {raw.shape} != {(height, width, RAW_CHANNELS)}")
        self.height, self.width = height, width
        self._param("raw", raw.astype(dtype))

    def __call__(self, image=None) -> Tensor:
        if image is not None and tuple(np.shape(image)[:2]) != (self.height, self.width):
            raise ModelError(f"image {np.shape(image)} does not match field {(self.height, self.width)}")
        return self.params["raw"]

    def config(self) -> dict:
        return {"kind": self.kind, "height": self.height, "width": self.width}


class StudentConvNet(_ConvStack):
    """Backbone (conv3x3 + gelu stages), a refine branch over image + features, and a 3x3/gelu/1x1 head."""

    kind = "conv"

    def __init__(self, width: int = DEFAULT_WIDTH, stages: int = 3, seed: int = 0,
                 camera: Camera | None = None, init_depth: float = DEFAULT_INIT_DEPTH, dtype=np.float32):
        super().__init__(seed, dtype)
        self.width, self.stages = width, stages
        c = 3
        for i in range(stages):
            self._conv(f"backbone{i}", c, width, 3)
            c = width
        self._conv("refine", 3 + width, width, 3)
        self._conv("head0", width, width, 3)
        self._conv("head1", width, RAW_CHANNELS, 1)
        # start from a mid-scene plane so the relu depth activation is live
        b = self.params["head1.b"].data
        fx = camera.intrinsics.fx if camera is not None else 32.0
        near = camera.near if camera is not None else 1.0
        b[0] = (init_depth - near) / fx
        b[3] = 2.0
        b[7] = 1.0

    def __call__(self, image) -> Tensor:
        x = Tensor(np.asarray(image, dtype=self.params["head1.w"].dtype))
        f = x
        for i in range(self.stages):
            f = ad.gelu(self._apply(f"backbone{i}", f))
        r = ad.gelu(self._apply("refine", ad.concat_channels([x, f])))
        h = ad.gelu(self._apply("head0", r))
        return self._apply("head1", h, k=1)

    def config(self) -> dict:
        return {"kind": self.kind, "width": self.width, "stages": self.stages}


class Extrapolator(_ConvStack):
    """Fill network: (rendered RGB, W) -> RGB in [0, 1].

    A full-resolution branch plus a quarter-resolution branch for context far
    from the visible region.
    """

    def __init__(self, width: int = DEFAULT_WIDTH, seed: int = 1, dtype=np.float32):
        super().__init__(seed, dtype)
        self.width = width
        self._conv("in", 4, width, 3)
        self._conv("coarse", width, width, 3)
        self._conv("mix", 2 * width, width, 3)
        self._conv("out", width, 3, 1)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[2] != 4:
            raise ad.ShapeError(f"extrapolator expects (H, W, 4), got {x.shape}")
        H, W, _ = x.shape
        a = ad.gelu(self._apply("in", x))
        c = ad.bilinear_resize(a, max(1, H // 4), max(1, W // 4))
        c = ad.gelu(self._apply("coarse", c))
        c = ad.bilinear_resize(c, H, W)
        m = ad.gelu(self._apply("mix", ad.concat_channels([a, c])))
        return ad.sigmoid(self._apply("out", m, k=1))

    def fill(self, rendered, weight, sees_weight: bool = True) -> Tensor:
        rendered = ad.as_tensor(rendered)
        weight = ad.as_tensor(weight, rendered)
        if not sees_weight:
            weight = Tensor(np.zeros(weight.shape, dtype=weight.dtype))
        return self(ad.concat_channels([rendered, ad.reshape(weight, weight.shape + (1,))]))

    def config(self) -> dict:
        return {"width": self.width}


def build_student(cfg: dict, camera: Camera, seed: int = 0, dtype=np.float32, image=None):
    kind = cfg.get("kind", "field")
    if kind == "field":
        img = image if cfg.get("color_from_image", True) else None
        return StudentField(camera.height, camera.width, camera, cfg.get("init_depth", DEFAULT_INIT_DEPTH),
                            image=img, dtype=dtype)
    if kind == "conv":
        return StudentConvNet(cfg.get("width", DEFAULT_WIDTH), cfg.get("stages", 3), seed, camera,
                              cfg.get("init_depth", DEFAULT_INIT_DEPTH), dtype=dtype)
    raise ModelError(f"unknown student kind {kind!r}")


def student_lift(model, image, camera: Camera, focal: float | None = None) -> LiftResult:
    image = np.asarray(image)
    if image.shape != (camera.height, camera.width, 3):
        raise ModelError(f"image {image.shape} does not match camera ({camera.height}, {camera.width}, 3)")
    return lift_predictions(model(image), camera, focal)


def student_forward(model, image, camera: Camera, focal: float | None = None) -> GaussianCloud:
    """One Gaussian per pixel of ``image``; differentiable back to the model parameters."""
    return student_lift(model, image, camera, focal).cloud


def extrapolate(g: Extrapolator, rendered, weight) -> np.ndarray:
    return g.fill(rendered, weight).numpy()


# teacher -------------------------------------------------------------------

@dataclass
class TeacherOracle:
    """Stand-in for a multi-view teacher: geometry known only up to the hidden scale ``s``.

    ``scaled_gt`` returns ``s`` times the ground-truth depth; ``plane_sweep``
    matches the two context images over depth hypotheses and scales the result.
    """

    variant: str = "scaled_gt"
    hidden_scale: float = 1.0
    n_hypotheses: int = 64
    depth_range: tuple = (2.0, 20.0)
    spacing: str = "inverse"      # "inverse" | "linear"
    hypotheses: tuple | None = None

    def __post_init__(self):
        if self.variant not in ("scaled_gt", "plane_sweep"):
            raise ModelError(f"unknown teacher variant {self.variant!r}")
        if not self.hidden_scale > 0:
            raise ModelError("hidden scale must be positive")

    @classmethod
    def with_random_scale(cls, seed: int, low: float = 0.5, high: float = 2.0, **kw) -> "TeacherOracle":
        """Draw ``s`` log-uniformly once from ``seed``."""
        s = float(np.exp(np.random.default_rng(seed).uniform(np.log(low), np.log(high))))
        return cls(hidden_scale=s, **kw)

    def depth_hypotheses(self) -> np.ndarray:
        if self.hypotheses is not None:
            return np.asarray(self.hypotheses, dtype=np.float64)
        lo, hi = self.depth_range
        if self.spacing == "linear":
            return np.linspace(lo, hi, self.n_hypotheses)
        return 1.0 / np.linspace(1.0 / lo, 1.0 / hi, self.n_hypotheses)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "hidden_scale": self.hidden_scale, "n_hypotheses": self.n_hypotheses,
                "depth_range": list(self.depth_range), "spacing": self.spacing,
                "hypotheses": None if self.hypotheses is None else list(self.hypotheses)}

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherOracle":
        d = dict(d)
        d["depth_range"] = tuple(d.get("depth_range", (2.0, 20.0)))
        if d.get("hypotheses") is not None:
            d["hypotheses"] = tuple(d["hypotheses"])
        return cls(**d)


def sample_bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``img`` at continuous pixel coordinates (centers at +0.5), edge-clamped."""
    coords = np.stack([v.ravel() - 0.5, u.ravel() - 0.5])
    chans = [ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).reshape(u.shape + (img.shape[2],))


def plane_sweep_depth(ref_img, ref_cam: Camera, src_img, src_cam: Camera, hypotheses,
                      window: int = 3, oob_penalty: float = 1.0) -> np.ndarray:
    """Per-pixel depth minimizing windowed SSD against the source view.

    For each fronto-parallel hypothesis the reference pixel centers are
    lifted, projected into ``src_cam`` and compared with bilinear samples;
    samples falling outside the source image cost ``oob_penalty`` per channel.
    Ties resolve to the earliest hypothesis.
    """
    ref_img = np.asarray(ref_img, dtype=np.float64)
    src_img = np.asarray(src_img, dtype=np.float64)
    hyps = np.asarray(hypotheses, dtype=np.float64)
    if hyps.ndim != 1 or len(hyps) == 0 or np.any(hyps <= 0):
        raise ModelError("depth hypotheses must be a non-empty list of positive depths")
    pix = ref_cam.pixel_centers()
    H, W = pix.shape[:2]
    sw, sh = src_cam.width, src_cam.height
    costs = np.empty((len(hyps), H, W))
    for i, d in enumerate(hyps):
        pts = unproject(ref_cam, pix, np.full((H, W), d))
        pc = src_cam.pose.apply(pts)
        k = src_cam.intrinsics
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = k.fx * pc[..., 0] / z + k.cx
            v = k.fy * pc[..., 1] / z + k.cy
        oob = ~((z > 0) & (u >= 0) & (u <= sw) & (v >= 0) & (v <= sh))
        u = np.where(oob, 0.5, u)
        v = np.where(oob, 0.5, v)
        diff = sample_bilinear(src_img, u, v) - ref_img
        c = (diff * diff).sum(axis=-1)
        c[oob] = oob_penalty * ref_img.shape[2]
        costs[i] = ndimage.uniform_filter(c, size=window, mode="nearest")
    return hyps[np.argmin(costs, axis=0)]


def context_truth(scene: SyntheticScene, cameras, supersample: int = 3):
    """Ground-truth ``(image, depth)`` per camera."""
    return [render_ground_truth(scene, c, supersample) for c in cameras]


def teacher_depths(oracle: TeacherOracle, scene: SyntheticScene, context_views, truths=None) -> list:
    """Teacher depth map per context view (in the teacher's hidden scale)."""
    truths = truths if truths is not None else context_truth(scene, context_views)
    s = oracle.hidden_scale
    if oracle.variant == "scaled_gt":
        return [s * d for _, d in truths]
    if len(context_views) < 2:
        raise ModelError("plane-sweep teacher needs at least two context views")
    hyps = oracle.depth_hypotheses()
    out = []
    for i, cam in enumerate(context_views):
        j = 1 if i == 0 else 0
        out.append(s * plane_sweep_depth(truths[i][0], cam, truths[j][0], context_views[j], hyps))
    return out


def teacher_centers(oracle: TeacherOracle, scene: SyntheticScene, context_views, truths=None) -> list:
    """``mu_t`` grids ``(H, W, 3)``: pixel centers lifted to the teacher depth."""
    depths = teacher_depths(oracle, scene, context_views, truths)
    return [unproject(cam, cam.pixel_centers(), d) for cam, d in zip(context_views, depths)]


# refine --------------------------------------------------------------------

@dataclass
class RefineResult:
    refined_depth: np.ndarray
    student_depth: np.ndarray
    rendered: np.ndarray
    shifted_camera: Camera


def refine_with_teacher(model, image, camera: Camera, shift: float = 0.5,
                        refiner: TeacherOracle | None = None) -> RefineResult:
    """Render the student cloud from a forward-shifted virtual camera and re-match.

    The two-view refiner is a plane sweep of the input view against the
    rendered view, using the exact virtual pose.
    """
    if shift == 0:
        raise ModelError("shift 0 gives no baseline to match against")
    refiner = refiner or TeacherOracle(variant="plane_sweep")
    lift = student_lift(model, image, camera)
    cloud = lift.cloud.detach().astype(np.float64)
    virtual = shifted_pose(camera, shift)
    rendered = rasterize(cloud, virtual).color
    refined = plane_sweep_depth(image, camera, rendered, virtual, refiner.depth_hypotheses())
    return RefineResult(refined, lift.depth.numpy().astype(np.float64), rendered, virtual)
