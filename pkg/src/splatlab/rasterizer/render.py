"""Tiled differentiable Gaussian rasterizer."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..geometry import Camera
from ..splat import GaussianCloud
from . import kernels
from .project import Projected, project_backward, project_gaussians

TILE = 16
DEPTH_EPS = 1e-4
MODES = ("color", "weight", "depth")
# feature channels composited per splat: rgb | 1 (weight) | camera depth
N_FEATS = 5


class StaleStateError(RuntimeError):
    """Backward called with a forward state that does not match the inputs."""


@dataclass
class CloudGradients:
    mu: np.ndarray
    alpha: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    color: np.ndarray

    def as_tuple(self):
        return self.mu, self.alpha, self.scale, self.rot, self.color


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3)
    weight: np.ndarray         # (H, W)
    depth: np.ndarray          # (H, W); far where weight <= DEPTH_EPS
    depth_sum: np.ndarray      # (H, W) un-normalized depth composite
    final_t: np.ndarray        # (H, W) residual transmittance
    n_contrib: np.ndarray      # (H, W) contributing splats per pixel
    # forward state retained for backward
    camera: Camera
    projected: Projected
    feats: np.ndarray
    opac: np.ndarray
    ranges: np.ndarray
    ids: np.ndarray
    tile: int
    fingerprint: str

    def get(self, mode: str) -> np.ndarray:
        if mode not in MODES:
            raise ValueError(f"unknown render mode {mode!r}; choose from {MODES}")
        return getattr(self, mode)


def _fingerprint(arrays) -> str:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _radius2(pr: Projected) -> np.ndarray:
    return np.ascontiguousarray(np.where(pr.valid, pr.radius * pr.radius, -1.0), dtype=pr.means2d.dtype)


def bin_tiles(pr: Projected, width: int, height: int, tile: int = TILE):
    """Sorted (tile, depth) splat lists.

    Returns ``ranges (n_tiles, 2)`` and flat Gaussian ``ids``; within a tile,
    ids are in global stable depth order (ties by Gaussian index).
    """
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    n_tiles = n_tx * n_ty
    order = np.argsort(pr.depth, kind="stable")
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))

    v = np.flatnonzero(pr.valid)
    mx, my, r = pr.means2d[v, 0], pr.means2d[v, 1], pr.radius[v]
    with np.errstate(invalid="ignore"):
        tx0 = np.clip(np.floor((mx - r) / tile), 0, n_tx).astype(np.int64)
        tx1 = np.clip(np.floor((mx + r) / tile) + 1, 0, n_tx).astype(np.int64)
        ty0 = np.clip(np.floor((my - r) / tile), 0, n_ty).astype(np.int64)
        ty1 = np.clip(np.floor((my + r) / tile) + 1, 0, n_ty).astype(np.int64)
    wx = np.maximum(tx1 - tx0, 0)
    wy = np.maximum(ty1 - ty0, 0)
    counts = wx * wy
    total = int(counts.sum())
    if total == 0:
        return np.zeros((n_tiles, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    owner = np.repeat(np.arange(len(v)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    wxo = wx[owner]
    tiles = (ty0[owner] + local // wxo) * n_tx + tx0[owner] + local % wxo
    gids = v[owner]
    perm = np.lexsort((rank[gids], tiles))
    tiles, gids = tiles[perm], gids[perm]
    starts = np.searchsorted(tiles, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tiles, np.arange(n_tiles), side="right")
    return np.stack([starts, ends], axis=1).astype(np.int64), gids.astype(np.int64)


def rasterize(cloud: GaussianCloud, camera: Camera, tile: int = TILE, dtype=None) -> RenderOutput:
    """Render color, weight and expected depth in one pass.

    Splats are composited front to back, ``out = sum_i v_i a_i prod_{j<i}(1 - a_j)``
    with ``a_i = alpha_i exp(-0.5 d^T Sigma'^-1 d)``; the background is zero.
    """
    mu, alpha, scale, rot, color = cloud.arrays(dtype)
    dt = mu.dtype if dtype is None else np.dtype(dtype)
    H, W = camera.height, camera.width
    pr = project_gaussians(camera, mu, alpha, scale, rot)
    feats = np.empty((len(mu), N_FEATS), dtype=dt)
    feats[:, :3] = color
    feats[:, 3] = 1.0
    feats[:, 4] = pr.depth
    opac = np.ascontiguousarray(alpha, dtype=dt)
    ranges, ids = bin_tiles(pr, W, H, tile)

    out = np.zeros((H, W, N_FEATS), dtype=dt)
    final_t = np.ones((H, W), dtype=dt)
    n_contrib = np.zeros((H, W), dtype=np.int64)
    if len(ids):
        kernels.composite_forward(ranges, ids, np.ascontiguousarray(pr.means2d), np.ascontiguousarray(pr.conic),
                                  opac, _radius2(pr), feats, H, W, tile, out, final_t, n_contrib)
    depth_sum = out[..., 4]
    ok = out[..., 3] > DEPTH_EPS
    depth = np.where(ok, depth_sum / np.where(ok, out[..., 3], 1.0), dt.type(camera.far)).astype(dt)
    # sum_i a_i T_i = 1 - T_final <= 1; only rounding can push past 1
    capped = np.minimum(out[..., :4], dt.type(1.0))
    return RenderOutput(
        color=capped[..., :3].copy(), weight=capped[..., 3].copy(), depth=depth, depth_sum=depth_sum.copy(),
        final_t=final_t, n_contrib=n_contrib, camera=camera, projected=pr, feats=feats, opac=opac,
        ranges=ranges, ids=ids, tile=tile, fingerprint=_fingerprint((mu, alpha, scale, rot, color)),
    )


def render(cloud: GaussianCloud, camera: Camera, mode: str = "color", tile: int = TILE, dtype=None) -> np.ndarray:
    return rasterize(cloud, camera, tile, dtype).get(mode)


def render_backward(state: RenderOutput, grad_color=None, grad_weight=None, grad_depth=None,
                    cloud: GaussianCloud | None = None) -> CloudGradients:
    """Exact gradients of ``<grad_color, color> + <grad_weight, weight> + <grad_depth, depth>``.

    Passing ``cloud`` checks that ``state`` was produced from it.
    """
    if cloud is not None and _fingerprint(cloud.arrays(state.feats.dtype)) != state.fingerprint:
        raise StaleStateError("render state is stale: the cloud changed since the forward pass")
    cam = state.camera
    H, W = cam.height, cam.width
    dt = state.feats.dtype
    n = len(state.opac)
    g = np.zeros((H, W, N_FEATS), dtype=dt)
    if grad_color is not None:
        g[..., :3] = grad_color
    if grad_weight is not None:
        g[..., 3] = grad_weight
    if grad_depth is not None:
        ok = state.weight > DEPTH_EPS
        wsafe = np.where(ok, state.weight, 1.0)
        gd = np.where(ok, grad_depth, 0.0)
        g[..., 4] = gd / wsafe
        g[..., 3] -= gd * state.depth_sum / (wsafe * wsafe)

    E = len(state.ids)
    d_means_e = np.zeros((E, 2), dtype=dt)
    d_conic_e = np.zeros((E, 3), dtype=dt)
    d_opac_e = np.zeros(E, dtype=dt)
    d_feats_e = np.zeros((E, N_FEATS), dtype=dt)
    if E:
        pr = state.projected
        kernels.composite_backward(state.ranges, state.ids, np.ascontiguousarray(pr.means2d),
                                   np.ascontiguousarray(pr.conic), state.opac, _radius2(pr), state.feats, H, W, state.tile,
                                   np.ascontiguousarray(g), d_means_e, d_conic_e, d_opac_e, d_feats_e)
    d_means = np.zeros((n, 2), dtype=dt)
    d_conic = np.zeros((n, 3), dtype=dt)
    d_opac = np.zeros(n, dtype=dt)
    d_feats = np.zeros((n, N_FEATS), dtype=dt)
    np.add.at(d_means, state.ids, d_means_e)
    np.add.at(d_conic, state.ids, d_conic_e)
    np.add.at(d_opac, state.ids, d_opac_e)
    np.add.at(d_feats, state.ids, d_feats_e)

    d_mu, d_scale, d_rot = project_backward(cam, state.projected, d_means, d_conic, d_feats[:, 4])
    return CloudGradients(d_mu, d_opac, d_scale, d_rot, d_feats[:, :3].copy())


def render_tensor(cloud: GaussianCloud, camera: Camera, tile: int = TILE):
    """Differentiable render node. Returns ``(color, weight, depth, state)`` tensors."""
    holder = {}

    def forward(mu, alpha, scale, rot, color):
        st = rasterize(GaussianCloud(mu, alpha, scale, rot, color), camera, tile)
        holder["state"] = st
        packed = np.concatenate([st.color, st.weight[..., None], st.depth[..., None]], axis=-1)

        def backward(g):
            grads = render_backward(st, g[..., :3], g[..., 3], g[..., 4])
            return grads.as_tuple()

        return packed, backward

    packed = ad.custom(cloud.tensors(), forward)
    return packed[..., :3], packed[..., 3], packed[..., 4], holder["state"]
