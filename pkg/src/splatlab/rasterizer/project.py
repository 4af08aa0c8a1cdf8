"""EWA projection of 3D Gaussians to screen-space conics, with its analytic backward."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Camera

DILATION = 0.3          # pixel^2 added to the 2D covariance diagonal
ALPHA_MIN = 1.0 / 255.0  # contributions below this are skipped


@dataclass
class Projected:
    means2d: np.ndarray   # (N, 2) pixel coordinates
    conic: np.ndarray     # (N, 3) inverse 2D covariance (a, b, c)
    depth: np.ndarray     # (N,) camera-space z
    radius: np.ndarray    # (N,) pixel radius beyond which alpha' < ALPHA_MIN
    valid: np.ndarray     # (N,) bool, inside [near, far] and able to contribute
    # saved for backward
    p_cam: np.ndarray
    Rq: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    scale: np.ndarray
    M: np.ndarray
    Sigma: np.ndarray
    T: np.ndarray
    cov2d: np.ndarray


def _quat_rotmat(qn: np.ndarray) -> np.ndarray:
    w, x, y, z = qn.T
    R = np.empty((len(qn), 3, 3), dtype=qn.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def project_gaussians(camera: Camera, mu, alpha, scale, rot) -> Projected:
    dt = mu.dtype
    k = camera.intrinsics
    fx, fy = dt.type(k.fx), dt.type(k.fy)
    W = camera.pose.R.astype(dt)
    p = mu @ W.T + camera.pose.t.astype(dt)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    in_range = (z >= camera.near) & (z <= camera.far)
    zs = np.where(in_range, z, dt.type(1.0))

    qnorm = np.sqrt((rot * rot).sum(axis=1))
    qn = rot / qnorm[:, None]
    Rq = _quat_rotmat(qn)
    M = Rq * scale[:, None, :]
    Sigma = M @ M.transpose(0, 2, 1)

    J = np.zeros((len(mu), 2, 3), dtype=dt)
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * x / (zs * zs)
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * y / (zs * zs)
    T = J @ W
    cov = T @ Sigma @ T.transpose(0, 2, 1)
    cov[:, 0, 0] += DILATION
    cov[:, 1, 1] += DILATION
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    means = np.stack([fx * x / zs + dt.type(k.cx), fy * y / zs + dt.type(k.cy)], axis=1)

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0))
    contributes = alpha >= ALPHA_MIN
    ratio = np.where(contributes, alpha / ALPHA_MIN, 1.0)
    # conservative: a relative pad absorbs rounding near the cutoff
    radius = np.sqrt(2.0 * lam_max * np.log(ratio)) * 1.0001 + 1e-3
    valid = in_range & contributes

    return Projected(means, conic, zs, radius, valid, p, Rq, qn, qnorm, scale, M, Sigma, T, cov)


def project_backward(camera: Camera, pr: Projected, d_means, d_conic, d_depth):
    """Chain screen-space gradients back to ``(d_mu, d_scale, d_rot)``.

    ``d_conic`` holds gradients w.r.t. ``(a, b, c)`` of the conic where the
    quadratic form is ``a dx^2 + 2 b dx dy + c dy^2``.
    """
    dt = pr.means2d.dtype
    k = camera.intrinsics
    fx, fy = dt.type(k.fx), dt.type(k.fy)
    W = camera.pose.R.astype(dt)
    x, y = pr.p_cam[:, 0], pr.p_cam[:, 1]
    z = pr.depth
    mask = pr.valid.astype(dt)
    d_means = d_means * mask[:, None]
    d_conic = d_conic * mask[:, None]
    d_depth = d_depth * mask

    n = len(z)
    C = np.empty((n, 2, 2), dtype=dt)
    C[:, 0, 0], C[:, 0, 1], C[:, 1, 0], C[:, 1, 1] = pr.conic[:, 0], pr.conic[:, 1], pr.conic[:, 1], pr.conic[:, 2]
    GC = np.empty((n, 2, 2), dtype=dt)
    GC[:, 0, 0] = d_conic[:, 0]
    GC[:, 0, 1] = GC[:, 1, 0] = 0.5 * d_conic[:, 1]
    GC[:, 1, 1] = d_conic[:, 2]
    GA = -C @ GC @ C

    T = pr.T
    GSigma = T.transpose(0, 2, 1) @ GA @ T
    GT = 2.0 * GA @ T @ pr.Sigma
    GJ = GT @ W.T

    iz = 1.0 / z
    iz2 = iz * iz
    dx = GJ[:, 0, 2] * (-fx * iz2) + d_means[:, 0] * fx * iz
    dy = GJ[:, 1, 2] * (-fy * iz2) + d_means[:, 1] * fy * iz
    dz = (GJ[:, 0, 0] * (-fx * iz2) + GJ[:, 0, 2] * (2 * fx * x * iz2 * iz)
          + GJ[:, 1, 1] * (-fy * iz2) + GJ[:, 1, 2] * (2 * fy * y * iz2 * iz)
          - d_means[:, 0] * fx * x * iz2 - d_means[:, 1] * fy * y * iz2 + d_depth)
    d_p = np.stack([dx, dy, dz], axis=1)
    d_mu = d_p @ W

    GM = 2.0 * GSigma @ pr.M
    d_scale = (GM * pr.Rq).sum(axis=1)
    G = GM * pr.scale[:, None, :]
    w, qx, qy, qz = pr.qn.T
    d_qn = 2.0 * np.stack([
        -qz * G[:, 0, 1] + qy * G[:, 0, 2] + qz * G[:, 1, 0] - qx * G[:, 1, 2] - qy * G[:, 2, 0] + qx * G[:, 2, 1],
        qy * G[:, 0, 1] + qz * G[:, 0, 2] + qy * G[:, 1, 0] - 2 * qx * G[:, 1, 1] - w * G[:, 1, 2]
        + qz * G[:, 2, 0] + w * G[:, 2, 1] - 2 * qx * G[:, 2, 2],
        -2 * qy * G[:, 0, 0] + qx * G[:, 0, 1] + w * G[:, 0, 2] + qx * G[:, 1, 0] + qz * G[:, 1, 2]
        - w * G[:, 2, 0] + qz * G[:, 2, 1] - 2 * qy * G[:, 2, 2],
        -2 * qz * G[:, 0, 0] - w * G[:, 0, 1] + qx * G[:, 0, 2] + w * G[:, 1, 0] - 2 * qz * G[:, 1, 1]
        + qy * G[:, 1, 2] + qx * G[:, 2, 0] + qy * G[:, 2, 1],
    ], axis=1)
    d_rot = (d_qn - pr.qn * (pr.qn * d_qn).sum(axis=1, keepdims=True)) / pr.qnorm[:, None]
    return d_mu, d_scale, d_rot
