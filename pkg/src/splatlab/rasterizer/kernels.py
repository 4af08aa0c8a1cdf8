"""Per-tile compositing kernels.

The backward pass re-walks each pixel's splat list front to back to recover
the per-splat opacity and transmittance, then scans back to front keeping the
composite of everything behind the current splat.  No division by
``1 - alpha`` is needed, so fully opaque splats are handled exactly.

Each list entry owns its own gradient slot; all pixels of one tile write to
that tile's slice only, so tiles can run in parallel without races and the
final reduction (done by the caller) is in fixed entry order.

``radius2`` is a per-splat squared pixel radius outside which the opacity is
provably below the cutoff; the distance test only skips work that would be
rejected anyway.
"""

from __future__ import annotations

import os

import numba
import numpy as np
from numba import njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is too old; workqueue is always available
    numba.config.THREADING_LAYER = "workqueue"


def set_threads(n: int | None = None) -> int:
    """Cap kernel worker threads (``SPLATLAB_THREADS`` when ``n`` is None)."""
    if n is None:
        env = os.environ.get("SPLATLAB_THREADS")
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


set_threads()

ALPHA_MIN = 1.0 / 255.0
# pixels per side of the sub-blocks that pre-filter a tile's list
SUB = 4


@njit(cache=True)
def _gather(ids, start, end, means, conic, opac, radius2):
    """Copy one tile's splat attributes into contiguous arrays (list order)."""
    m = end - start
    dt = means.dtype
    mx = np.empty(m, dtype=dt)
    my = np.empty(m, dtype=dt)
    r2 = np.empty(m, dtype=dt)
    ca = np.empty(m, dtype=dt)
    cb = np.empty(m, dtype=dt)
    cc = np.empty(m, dtype=dt)
    op = np.empty(m, dtype=dt)
    for k in range(m):
        g = ids[start + k]
        mx[k] = means[g, 0]
        my[k] = means[g, 1]
        r2[k] = radius2[g]
        ca[k] = conic[g, 0]
        cb[k] = conic[g, 1]
        cc[k] = conic[g, 2]
        op[k] = opac[g]
    return mx, my, r2, ca, cb, cc, op


@njit(cache=True)
def _sub_list(mx, my, r2, x0, x1, y0, y1, sel):
    """Indices (in list order) of splats whose cutoff disk reaches a pixel center in the block.

    Uses the block's pixel center nearest to each splat, with the same
    arithmetic as the per-pixel test, so no contributing splat is dropped.
    """
    n = 0
    lox = x0 + 0.5
    hix = x1 - 0.5
    loy = y0 + 0.5
    hiy = y1 - 0.5
    for k in range(mx.shape[0]):
        cx = min(max(mx[k], lox), hix)
        cy = min(max(my[k], loy), hiy)
        dx = cx - mx[k]
        dy = cy - my[k]
        if dx * dx + dy * dy <= r2[k]:
            sel[n] = k
            n += 1
    return n


@njit(cache=True, parallel=True)
def composite_forward(ranges, ids, means, conic, opac, radius2, feats, height, width, tile, out, final_t, n_contrib):
    n_tx = (width + tile - 1) // tile
    n_tiles = ranges.shape[0]
    n_sub = (tile + SUB - 1) // SUB
    nc = feats.shape[1]
    amin = ALPHA_MIN
    for t in prange(n_tiles):
        start = ranges[t, 0]
        end = ranges[t, 1]
        mx, my, r2, ca, cb, cc, op = _gather(ids, start, end, means, conic, opac, radius2)
        sel = np.empty(end - start, dtype=np.int64)
        for b in range(n_sub * n_sub):
            sx = (t % n_tx) * tile + (b % n_sub) * SUB
            sy = (t // n_tx) * tile + (b // n_sub) * SUB
            ex = min(width, sx + SUB)
            ey = min(height, sy + SUB)
            if sx >= ex or sy >= ey:
                continue
            ns = _sub_list(mx, my, r2, sx, ex, sy, ey, sel)
            for p in range((ex - sx) * (ey - sy)):
                px = sx + p % (ex - sx)
                py = sy + p // (ex - sx)
                xc = px + 0.5
                yc = py + 0.5
                T = 1.0
                cnt = 0
                for j in range(ns):
                    k = sel[j]
                    dx = xc - mx[k]
                    dy = yc - my[k]
                    if dx * dx + dy * dy > r2[k]:
                        continue
                    power = -0.5 * (ca[k] * dx * dx + 2.0 * cb[k] * dx * dy + cc[k] * dy * dy)
                    a = op[k] * np.exp(power)
                    if a < amin:
                        continue
                    w = a * T
                    g = ids[start + k]
                    for c in range(nc):
                        out[py, px, c] += feats[g, c] * w
                    T = T * (1.0 - a)
                    cnt += 1
                final_t[py, px] = T
                n_contrib[py, px] = cnt


@njit(cache=True, parallel=True)
def composite_backward(ranges, ids, means, conic, opac, radius2, feats, height, width, tile, grad_out,
                       d_means, d_conic, d_opac, d_feats):
    n_tx = (width + tile - 1) // tile
    n_tiles = ranges.shape[0]
    n_sub = (tile + SUB - 1) // SUB
    nc = feats.shape[1]
    amin = ALPHA_MIN
    for t in prange(n_tiles):
        start = ranges[t, 0]
        end = ranges[t, 1]
        m = end - start
        ent = np.empty(m, dtype=np.int64)
        a_buf = np.empty(m, dtype=feats.dtype)
        g_buf = np.empty(m, dtype=feats.dtype)
        t_buf = np.empty(m, dtype=feats.dtype)
        behind = np.empty(nc, dtype=feats.dtype)
        mx, my, r2, ca, cb, cc, op = _gather(ids, start, end, means, conic, opac, radius2)
        sel = np.empty(m, dtype=np.int64)
        for b in range(n_sub * n_sub):
            sx = (t % n_tx) * tile + (b % n_sub) * SUB
            sy = (t // n_tx) * tile + (b // n_sub) * SUB
            ex = min(width, sx + SUB)
            ey = min(height, sy + SUB)
            if sx >= ex or sy >= ey:
                continue
            ns = _sub_list(mx, my, r2, sx, ex, sy, ey, sel)
            for p in range((ex - sx) * (ey - sy)):
                px = sx + p % (ex - sx)
                py = sy + p // (ex - sx)
                xc = px + 0.5
                yc = py + 0.5
                T = 1.0
                cnt = 0
                for j in range(ns):
                    k = sel[j]
                    dx = xc - mx[k]
                    dy = yc - my[k]
                    if dx * dx + dy * dy > r2[k]:
                        continue
                    power = -0.5 * (ca[k] * dx * dx + 2.0 * cb[k] * dx * dy + cc[k] * dy * dy)
                    G = np.exp(power)
                    a = op[k] * G
                    if a < amin:
                        continue
                    ent[cnt] = k
                    a_buf[cnt] = a
                    g_buf[cnt] = G
                    t_buf[cnt] = T
                    T = T * (1.0 - a)
                    cnt += 1
                for c in range(nc):
                    behind[c] = 0.0
                for i in range(cnt - 1, -1, -1):
                    k = ent[i]
                    e = start + k
                    g = ids[e]
                    a = a_buf[i]
                    Tk = t_buf[i]
                    d_a = 0.0
                    for c in range(nc):
                        go = grad_out[py, px, c]
                        d_feats[e, c] += go * a * Tk
                        d_a += go * (feats[g, c] - behind[c])
                        behind[c] = feats[g, c] * a + (1.0 - a) * behind[c]
                    d_a *= Tk
                    d_opac[e] += d_a * g_buf[i]
                    d_pow = d_a * a
                    dx = xc - mx[k]
                    dy = yc - my[k]
                    d_means[e, 0] += d_pow * (ca[k] * dx + cb[k] * dy)
                    d_means[e, 1] += d_pow * (cb[k] * dx + cc[k] * dy)
                    d_conic[e, 0] += -0.5 * d_pow * dx * dx
                    d_conic[e, 1] += -d_pow * dx * dy
                    d_conic[e, 2] += -0.5 * d_pow * dy * dy
