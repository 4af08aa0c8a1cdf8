"""Evaluation metrics: PSNR, SSIM, depth errors and the crop / ordinal protocols."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff.nn import resize_matrices

PSNR_CAP = 99.0
DELTA1_THRESHOLD = 1.25
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class MetricError(ValueError):
    pass


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for images on unit range; identical images give ``PSNR_CAP``."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2D array."""
    k = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(a, b) -> float:
    """Mean SSIM (Gaussian 11x11 window, sigma 1.5, unit data range), channel-averaged.

    Statistics are taken over window positions fully inside the image.
    """
    a, b = _same_shape(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise MetricError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


@dataclass
class DepthEvalResult:
    abs_rel: float
    delta1: float
    pixel_count: int

    def to_dict(self):
        return asdict(self)


def depth_metrics(pred, gt, mask=None, median_scaling: bool = False) -> DepthEvalResult:
    """AbsRel and delta1 over masked pixels.

    With ``median_scaling`` each map is divided by its own masked median first.
    delta1 counts ``max(p/g, g/p) < 1.25`` (strict).
    """
    pred, gt = _same_shape(pred, gt)
    m = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise MetricError("empty evaluation mask")
    p, g = pred[m], gt[m]
    if np.any(g <= 0) or np.any(p <= 0):
        raise MetricError("depths must be positive inside the mask")
    if median_scaling:
        p = p / np.median(p)
        g = g / np.median(g)
    abs_rel = float(np.mean(np.abs(p - g) / g))
    ratio = np.maximum(p / g, g / p)
    delta1 = float(np.mean(ratio < DELTA1_THRESHOLD))
    return DepthEvalResult(abs_rel, delta1, int(m.sum()))


def ordinal_accuracy(pred, pairs) -> float:
    """Fraction of pixel pairs whose closer-pixel label agrees with ``pred``.

    ``pairs`` holds ``((ax, ay), (bx, by), closer)`` with ``closer`` in ``{'a', 'b'}``;
    exact depth ties count as wrong.
    """
    pred = np.asarray(pred)
    pairs = list(pairs)
    if not pairs:
        raise MetricError("no ordinal pairs given")
    h, w = pred.shape
    correct = 0
    for (ax, ay), (bx, by), closer in pairs:
        if not (0 <= ax < w and 0 <= bx < w and 0 <= ay < h and 0 <= by < h):
            raise MetricError("pair pixel out of bounds")
        da, db = pred[ay, ax], pred[by, bx]
        if closer == "a":
            correct += da < db
        elif closer == "b":
            correct += db < da
        else:
            raise MetricError(f"closer must be 'a' or 'b', got {closer!r}")
    return correct / len(pairs)


def pairs_from_json(records) -> list:
    return [((int(r["ax"]), int(r["ay"])), (int(r["bx"]), int(r["by"])), r["closer"]) for r in records]


def pairs_to_json(pairs) -> list:
    return [{"ax": a[0], "ay": a[1], "bx": b[0], "by": b[1], "closer": c} for a, b, c in pairs]


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    ry, rx = resize_matrices(img.shape[:2], (out_h, out_w))
    if img.ndim == 2:
        return ry @ img @ rx.T
    return np.einsum("ah,hwc,bw->abc", ry, img, rx)


def resize_nearest(img, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape[:2]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return img[ys][:, xs]


def square_crops(height: int, width: int) -> list[tuple[int, int, int, int]]:
    """Two maximal squares ``(y0, y1, x0, x1)`` anchored at both ends of the long axis."""
    s = min(height, width)
    if width >= height:
        return [(0, s, 0, s), (0, s, width - s, width)]
    return [(0, s, 0, s), (height - s, height, 0, s)]


def diode_crop_protocol(image, depth, mask, size: int = 256):
    """Crop two maximal squares and resize each to ``size``.

    Bilinear for image and depth, nearest for the mask.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    out = []
    for y0, y1, x0, x1 in square_crops(h, w):
        out.append((
            resize_bilinear(image[y0:y1, x0:x1], size, size),
            resize_bilinear(np.asarray(depth)[y0:y1, x0:x1], size, size),
            resize_nearest(np.asarray(mask, dtype=bool)[y0:y1, x0:x1], size, size),
        ))
    return out


def pad_and_resize(img, size: int = 256):
    """Pad the shorter edge (bottom/right, edge values) to square, then resize.

    Returns ``(resized, scale)`` where original pixel ``(x, y)`` maps to
    ``floor((x + 0.5) * scale)`` in the output.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    s = max(h, w)
    pad = ((0, s - h), (0, s - w)) + ((0, 0),) * (img.ndim - 2)
    sq = np.pad(img, pad, mode="edge")
    return resize_bilinear(sq, size, size), size / s


def map_pairs(pairs, scale: float, size: int):
    def m(p):
        return (min(int((p[0] + 0.5) * scale), size - 1), min(int((p[1] + 0.5) * scale), size - 1))
    return [(m(a), m(b), c) for a, b, c in pairs]
