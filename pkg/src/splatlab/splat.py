"""3D Gaussian primitives and the per-pixel lift from network outputs to a cloud."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Camera

SCALE_FLOOR = 1e-6
RAW_CHANNELS = 14

# raw head layout: depth | offset xy | alpha | scale xyz | quaternion wxyz | rgb
CH_DEPTH = slice(0, 1)
CH_OFFSET = slice(1, 3)
CH_ALPHA = slice(3, 4)
CH_SCALE = slice(4, 7)
CH_ROT = slice(7, 11)
CH_COLOR = slice(11, 14)

OFFSET_RANGE = 0.5  # max sub-pixel offset of a center, in pixels


class SplatError(ValueError):
    pass


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions ``(w, x, y, z)``; input is normalized first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def build_covariance(scale, rot) -> np.ndarray:
    """``R(q) diag(scale^2) R(q)^T``; broadcasts over leading dims."""
    R = quat_to_rotmat(rot)
    M = R * np.asarray(scale, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass(frozen=True)
class Gaussian:
    mu: np.ndarray
    alpha: float
    scale: np.ndarray
    rot: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise SplatError("alpha must lie in [0, 1]")
        if np.any(np.asarray(self.scale) < SCALE_FLOOR):
            raise SplatError("scale below floor")
        if abs(np.linalg.norm(self.rot) - 1.0) > 1e-6:
            raise SplatError("rotation quaternion must be unit length")
        c = np.asarray(self.color)
        if np.any(c < 0) or np.any(c > 1):
            raise SplatError("color must lie in [0, 1]")

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.scale, self.rot)


class GaussianCloud:
    """Struct-of-arrays Gaussian set; fields are :class:`Tensor` so clouds can sit in a graph.

    Shapes: ``mu (N,3)``, ``alpha (N,)``, ``scale (N,3)``, ``rot (N,4)``, ``color (N,3)``.
    """

    FIELDS = ("mu", "alpha", "scale", "rot", "color")

    def __init__(self, mu, alpha, scale, rot, color):
        self.mu = ad.as_tensor(mu)
        self.alpha = ad.as_tensor(alpha)
        self.scale = ad.as_tensor(scale)
        self.rot = ad.as_tensor(rot)
        self.color = ad.as_tensor(color)
        n = self.mu.shape[0] if self.mu.ndim == 2 else -1
        expected = {"mu": (n, 3), "alpha": (n,), "scale": (n, 3), "rot": (n, 4), "color": (n, 3)}
        for name, shp in expected.items():
            if getattr(self, name).shape != shp:
                raise SplatError(f"{name} has shape {getattr(self, name).shape}, expected {shp}")

    @classmethod
    def empty(cls, dtype=np.float64):
        z = lambda *s: np.zeros(s, dtype=dtype)  # noqa: E731
        return cls(z(0, 3), z(0), z(0, 3), z(0, 4), z(0, 3))

    @classmethod
    def from_gaussians(cls, gaussians):
        gs = list(gaussians)
        if not gs:
            return cls.empty()
        return cls(
            np.array([g.mu for g in gs], dtype=np.float64),
            np.array([g.alpha for g in gs], dtype=np.float64),
            np.array([g.scale for g in gs], dtype=np.float64),
            np.array([g.rot for g in gs], dtype=np.float64),
            np.array([g.color for g in gs], dtype=np.float64),
        )

    def __len__(self):
        return self.mu.shape[0]

    def __getitem__(self, i) -> Gaussian:
        return Gaussian(self.mu.data[i].copy(), float(self.alpha.data[i]), self.scale.data[i].copy(),
                        self.rot.data[i].copy(), self.color.data[i].copy())

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def arrays(self, dtype=None) -> tuple[np.ndarray, ...]:
        return tuple(np.asarray(getattr(self, f).data, dtype=dtype) for f in self.FIELDS)

    def tensors(self) -> tuple[Tensor, ...]:
        return tuple(getattr(self, f) for f in self.FIELDS)

    def detach(self) -> "GaussianCloud":
        return GaussianCloud(*(t.detach() for t in self.tensors()))

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(*self.arrays(dtype))

    def recolor(self, value=1.0) -> "GaussianCloud":
        """Same geometry with every color set to ``value``."""
        mu, alpha, scale, rot, color = self.arrays()
        return GaussianCloud(mu, alpha, scale, rot, np.full_like(color, value))

    def validate(self) -> None:
        mu, alpha, scale, rot, color = self.arrays()
        if not all(np.all(np.isfinite(a)) for a in (mu, alpha, scale, rot, color)):
            raise SplatError("non-finite Gaussian parameters")
        if np.any(alpha < 0) or np.any(alpha > 1):
            raise SplatError("alpha outside [0, 1]")
        if np.any(scale < SCALE_FLOOR):
            raise SplatError("scale below floor")
        if len(rot) and np.abs(np.linalg.norm(rot, axis=1) - 1).max() > 1e-6:
            raise SplatError("non-unit quaternion")
        if np.any(color < 0) or np.any(color > 1):
            raise SplatError("color outside [0, 1]")

    @staticmethod
    def concat(clouds) -> "GaussianCloud":
        clouds = list(clouds)
        return GaussianCloud(*(ad.concat([getattr(c, f) for c in clouds], axis=0) for f in GaussianCloud.FIELDS))

    # binary dump: u64 count, then 14 little-endian f32 per Gaussian
    def to_bytes(self) -> bytes:
        mu, alpha, scale, rot, color = self.arrays(np.float64)
        rows = np.concatenate([mu, alpha[:, None], scale, rot, color], axis=1).astype("<f4")
        return struct.pack("<Q", len(self)) + rows.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GaussianCloud":
        (n,) = struct.unpack_from("<Q", buf, 0)
        if len(buf) != 8 + n * 14 * 4:
            raise SplatError("cloud dump size does not match its header")
        rows = np.frombuffer(buf, dtype="<f4", offset=8).reshape(n, 14).astype(np.float64)
        return cls(rows[:, 0:3], rows[:, 3], rows[:, 4:7], rows[:, 7:11], rows[:, 11:14])

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GaussianCloud":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


@dataclass
class LiftResult:
    cloud: GaussianCloud
    mu_grid: Tensor  # (H, W, 3)
    depth: Tensor    # (H, W)


def lift_predictions(raw: Tensor, camera: Camera, focal: float | None = None) -> LiftResult:
    """Turn a raw ``(H, W, 14)`` head output into one Gaussian per pixel.

    Activations: relu on depth followed by ``normalize_depth``, ``0.5*tanh`` sub-pixel
    offsets, sigmoid opacity and color, softplus scales measured in pixel footprints
    (``softplus(raw) * depth / fx``), normalized quaternions.
    """
    raw = ad.as_tensor(raw)
    H, W = camera.height, camera.width
    if raw.shape != (H, W, RAW_CHANNELS):
        raise SplatError(f"prediction grid {raw.shape} does not match camera ({H}, {W}, {RAW_CHANNELS})")
    k = camera.intrinsics
    dt = raw.dtype
    f = k.fx if focal is None else focal

    depth_act = ad.relu(raw[..., 0])
    depth = ad.clamp(depth_act * f + camera.near, camera.near, camera.far)

    offset = ad.tanh(raw[..., CH_OFFSET]) * OFFSET_RANGE
    pix = camera.pixel_centers().astype(dt)
    ray_x = (offset[..., 0] + (pix[..., 0] - k.cx).astype(dt)) * (1.0 / k.fx)
    ray_y = (offset[..., 1] + (pix[..., 1] - k.cy).astype(dt)) * (1.0 / k.fy)
    ray_cam = ad.stack([ray_x, ray_y, ad.Tensor(np.ones((H, W), dtype=dt))], axis=-1)
    ray_world = ad.matmul(ray_cam, camera.pose.R.astype(dt))
    mu_grid = ray_world * ad.reshape(depth, (H, W, 1)) + camera.center.astype(dt)

    alpha = ad.sigmoid(raw[..., 3])
    pixel_size = ad.reshape(depth, (H, W, 1)) * (1.0 / f)
    scale = ad.softplus(raw[..., CH_SCALE]) * pixel_size + SCALE_FLOOR
    q = raw[..., CH_ROT]
    qn = ad.sqrt(ad.tsum(ad.square(q), axis=-1, keepdims=True) + 1e-12)
    rot = q / qn
    color = ad.sigmoid(raw[..., CH_COLOR])

    n = H * W
    cloud = GaussianCloud(
        ad.reshape(mu_grid, (n, 3)), ad.reshape(alpha, (n,)), ad.reshape(scale, (n, 3)),
        ad.reshape(rot, (n, 4)), ad.reshape(color, (n, 3)),
    )
    return LiftResult(cloud, mu_grid, depth)


def raw_from_values(depth, camera: Camera, alpha=0.99, scale_px=0.7, color=None, focal: float | None = None):
    """Inverse activations: a raw grid that lifts to the given per-pixel values.

    ``depth`` is an (H, W) array in ``[near, far)``; ``scale_px`` is the isotropic scale
    in pixel footprints.
    """
    H, W = camera.height, camera.width
    f = camera.intrinsics.fx if focal is None else focal
    raw = np.zeros((H, W, RAW_CHANNELS))
    raw[..., 0] = (np.asarray(depth, dtype=np.float64) - camera.near) / f
    raw[..., 3] = np.log(alpha / (1 - alpha))
    raw[..., 4:7] = np.log(np.expm1(scale_px))
    raw[..., 7] = 1.0
    if color is not None:
        c = np.clip(np.asarray(color, dtype=np.float64), 1e-4, 1 - 1e-4)
        raw[..., 11:14] = np.log(c / (1 - c))
    return raw
