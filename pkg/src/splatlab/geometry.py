"""Pinhole cameras, rigid poses and the depth normalization used by the student head.

Conventions
-----------
* Poses are stored world->camera: ``p_cam = R @ p_world + t``.
* Pixel ``(col, row)`` has its center at ``(col + 0.5, row + 0.5)``.
* Camera space is x right, y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid camera, pose or point."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie strictly inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise GeometryError("R must be a proper rotation")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.R.T @ self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    def __eq__(self, other):
        return isinstance(other, Pose) and np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    def __hash__(self):
        return hash((self.R.tobytes(), self.t.tobytes()))


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose
    near: float = 1.0
    far: float = 100.0

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise GeometryError(f"need 0 < near < far, got near={self.near}, far={self.far}")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def P(self) -> np.ndarray:
        """3x4 projection matrix ``K [R | t]``."""
        return self.intrinsics.K @ np.hstack([self.pose.R, self.pose.t[:, None]])

    @property
    def center(self) -> np.ndarray:
        return self.pose.center

    def transformed(self, T: Pose) -> "Camera":
        """Camera moved rigidly by ``T`` in the world.

        ``project(cam.transformed(T), p) == project(cam, T⁻¹ p)``.
        """
        return replace(self, pose=self.pose.compose(T.inverse()))

    def pixel_centers(self) -> np.ndarray:
        """(H, W, 2) array of pixel-center coordinates ``(x, y)``."""
        xs = np.arange(self.width, dtype=np.float64) + 0.5
        ys = np.arange(self.height, dtype=np.float64) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def rays_world(self) -> np.ndarray:
        """(H, W, 3) world-space ray directions with unit camera-space z."""
        k = self.intrinsics
        pix = self.pixel_centers()
        d_cam = np.stack(
            [(pix[..., 0] - k.cx) / k.fx, (pix[..., 1] - k.cy) / k.fy, np.ones(pix.shape[:2])], axis=-1
        )
        return d_cam @ self.pose.R

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "fx": float(k.fx), "fy": float(k.fy), "cx": float(k.cx), "cy": float(k.cy),
            "width": int(k.width), "height": int(k.height),
            "R": [float(v) for v in self.pose.R.ravel()],
            "t": [float(v) for v in self.pose.t],
            "near": float(self.near), "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            intr = Intrinsics(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))
            R = np.asarray(d["R"], dtype=np.float64)
            if R.size != 9 or len(d["t"]) != 3:
                raise GeometryError("R needs 9 floats and t needs 3")
            return cls(intr, Pose(R.reshape(3, 3), d["t"]), d["near"], d["far"])
        except KeyError as e:
            raise GeometryError(f"camera record missing field {e}") from None


def simple_camera(width: int = 32, height: int = 32, focal: float | None = None,
                  pose: Pose | None = None, near: float = 1.0, far: float = 100.0) -> Camera:
    """Centered-principal-point camera; ``focal`` defaults to the image width."""
    f = float(width if focal is None else focal)
    return Camera(Intrinsics(f, f, width / 2.0, height / 2.0, width, height), pose or Pose(), near, far)


def project(camera: Camera, point) -> tuple[np.ndarray, float] | None:
    """Project a world point to ``(pixel, depth)``.

    Returns ``None`` for points at or behind the camera plane (z <= 0).
    """
    x, y, z = camera.pose.apply(np.asarray(point, dtype=np.float64))
    if not z > 0:
        return None
    k = camera.intrinsics
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy]), float(z)


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(pixels (..., 2), depth (...))``; invalid depth is left as is."""
    pc = camera.pose.apply(points)
    z = pc[..., 2]
    k = camera.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = np.stack([k.fx * pc[..., 0] / z + k.cx, k.fy * pc[..., 1] / z + k.cy], axis=-1)
    return pix, z


def unproject(camera: Camera, pixel, depth) -> np.ndarray:
    """Lift pixel coordinates at camera-space depth back to world space."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise GeometryError("depth must be positive")
    pixel = np.asarray(pixel, dtype=np.float64)
    k = camera.intrinsics
    pc = np.stack(
        [(pixel[..., 0] - k.cx) / k.fx * depth, (pixel[..., 1] - k.cy) / k.fy * depth, depth * np.ones_like(pixel[..., 0])],
        axis=-1,
    )
    return camera.pose.inverse().apply(pc)


def normalize_depth(raw, camera: Camera, focal: float | None = None):
    """Scale, shift and clip a non-negative head activation into ``[near, far]``.

    ``focal`` defaults to ``fx``.
    """
    f = camera.intrinsics.fx if focal is None else focal
    return np.clip(f * np.asarray(raw, dtype=np.float64) + camera.near, camera.near, camera.far)


def shifted_pose(camera: Camera, forward_shift: float) -> Camera:
    """Translate the camera along its own viewing axis."""
    t = camera.pose.t - np.array([0.0, 0.0, forward_shift])
    return replace(camera, pose=Pose(camera.pose.R, t))


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx
    # re-orthonormalize so Pose validation at 1e-9 always passes
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def look_pose(center, R_cam_to_world: np.ndarray) -> Pose:
    """Pose for a camera at ``center`` with the given camera->world rotation."""
    Rw = np.asarray(R_cam_to_world, dtype=np.float64).T
    return Pose(Rw, -Rw @ np.asarray(center, dtype=np.float64))
