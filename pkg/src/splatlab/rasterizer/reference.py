"""Brute-force renderer used as a test oracle.

No tiling and no radius culling: every pixel visits every Gaussian in one
global stable depth order.  Covariances go through scipy's quaternion code and
explicit matrix inverses so this path shares no projection math with the
tiled renderer.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from ..geometry import Camera
from ..splat import GaussianCloud

DILATION = 0.3
ALPHA_MIN = 1.0 / 255.0
DEPTH_EPS = 1e-4


def render_brute_force(cloud: GaussianCloud, camera: Camera, mode: str = "color") -> np.ndarray:
    mu, alpha, scale, rot, color = cloud.arrays(np.float64)
    H, W = camera.height, camera.width
    k = camera.intrinsics
    Rw, t = camera.pose.R, camera.pose.t

    ys, xs = np.mgrid[0:H, 0:W]
    pix = np.stack([xs + 0.5, ys + 0.5], axis=-1).reshape(-1, 2)
    acc = np.zeros((H * W, 5))
    trans = np.ones(H * W)

    z_all = (mu @ Rw.T + t)[:, 2]
    for i in np.argsort(z_all, kind="stable"):
        x, y, z = Rw @ mu[i] + t
        if not (camera.near <= z <= camera.far):
            continue
        R = Rotation.from_quat([rot[i, 1], rot[i, 2], rot[i, 3], rot[i, 0]]).as_matrix()
        sigma = R @ np.diag(scale[i] ** 2) @ R.T
        J = np.array([[k.fx / z, 0.0, -k.fx * x / z**2], [0.0, k.fy / z, -k.fy * y / z**2]])
        cov2d = J @ Rw @ sigma @ Rw.T @ J.T + DILATION * np.eye(2)
        inv = np.linalg.inv(cov2d)
        center = np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])
        d = pix - center
        q = np.einsum("ni,ij,nj->n", d, inv, d)
        a = alpha[i] * np.exp(-0.5 * q)
        a = np.where(a < ALPHA_MIN, 0.0, a)
        v = np.array([color[i, 0], color[i, 1], color[i, 2], 1.0, z])
        acc += (a * trans)[:, None] * v[None, :]
        trans = trans * (1.0 - a)

    acc = acc.reshape(H, W, 5)
    if mode == "color":
        return acc[..., :3]
    if mode == "weight":
        return acc[..., 3]
    if mode == "depth":
        w = acc[..., 3]
        return np.where(w > DEPTH_EPS, acc[..., 4] / np.where(w > DEPTH_EPS, w, 1.0), camera.far)
    raise ValueError(f"unknown render mode {mode!r}")
