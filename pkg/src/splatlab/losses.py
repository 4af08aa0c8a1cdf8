"""Training objectives: teacher geometry, 3D gradient matching, composition and photometric loss.

All reductions are means over elements, so the weights do not depend on resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class LossConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_geo: float = 1.0
    lambda_grad: float = 1.0
    lambda_l2: float = 1.0
    lambda_perc: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise LossConfigError(f"{k} must be non-negative, got {v}")


@dataclass
class AblationFlags:
    """Switches mirroring the cumulative ablation ladder.

    ``no_extrapolation`` implies the composition is gone too, so it must be
    combined with ``no_composition``.
    """

    no_composition: bool = False
    no_extrapolation: bool = False
    no_grad_match: bool = False
    no_teacher: bool = False
    stop_gradient_routing: bool = True
    extrapolator_sees_weight: bool = True

    def validate(self) -> None:
        if self.no_extrapolation and not self.no_composition:
            raise LossConfigError("no_extrapolation requires no_composition: there is nothing to compose with")


@dataclass
class LossReport:
    geo: float = 0.0
    grad: float = 0.0
    l2: float = 0.0
    perc: float = 0.0
    total: float = 0.0
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def record(self, it: int) -> dict:
        return {"iter": it, "geo": self.geo, "grad": self.grad, "l2": self.l2, "perc": self.perc, "total": self.total}


def _check_shapes(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ad.ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def loss_geo(mu_s, mu_t, w: LossWeights) -> Tensor:
    """``lambda_geo * mean |mu_t - mu_s|`` over all H*W*3 coordinates."""
    mu_s = ad.as_tensor(mu_s)
    mu_t = ad.as_tensor(mu_t, mu_s)
    _check_shapes(mu_s, mu_t, "loss_geo")
    return ad.mean(ad.absolute(mu_t - mu_s)) * w.lambda_geo


def grad3d(mu) -> Tensor:
    """Euclidean distances between neighbouring centers.

    Output ``(H-1, W-1, 2)``: channel 0 is the distance to the next row,
    channel 1 to the next column (forward differences).
    """
    mu = ad.as_tensor(mu)
    if mu.ndim != 3 or mu.shape[2] != 3:
        raise ad.ShapeError(f"grad3d expects (H, W, 3), got {mu.shape}")
    H, W, _ = mu.shape
    if H < 2 or W < 2:
        raise ad.ShapeError("grad3d needs at least a 2x2 grid")
    base = mu[:-1, :-1]

    def dist(d):
        sq = ad.square(d)
        return ad.sqrt(sq[..., 0] + sq[..., 1] + sq[..., 2])

    return ad.stack([dist(mu[1:, :-1] - base), dist(mu[:-1, 1:] - base)], axis=-1)


def loss_grad(mu_s, mu_t, w: LossWeights) -> Tensor:
    mu_s = ad.as_tensor(mu_s)
    mu_t = ad.as_tensor(mu_t, mu_s)
    _check_shapes(mu_s, mu_t, "loss_grad")
    return ad.mean(ad.absolute(grad3d(mu_t) - grad3d(mu_s))) * w.lambda_grad


def compose(rendered, filled, weight) -> Tensor:
    """``filled * (1 - W) + rendered * W`` with ``W`` broadcast over channels."""
    rendered, filled, weight = ad.as_tensor(rendered), ad.as_tensor(filled), ad.as_tensor(weight)
    _check_shapes(rendered, filled, "compose")
    if tuple(weight.shape) != tuple(rendered.shape[:2]):
        raise ad.ShapeError(f"compose: weight {weight.shape} does not match image {rendered.shape}")
    w3 = ad.reshape(weight, weight.shape + (1,))
    return filled * (1.0 - w3) + rendered * w3


_BINOMIAL5 = np.outer([1, 4, 6, 4, 1], [1, 4, 6, 4, 1]) / 256.0
_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]) / 8.0
_SOBEL_Y = _SOBEL_X.T


def perc_proxy(x, y) -> Tensor:
    """Deterministic stand-in for a learned perceptual distance.

    Mean L1 of the difference at Gaussian-pyramid levels 1/2 and 1/4, plus the
    mean L1 of Sobel gradient differences (x and y averaged) at full scale.
    The operators are linear, so they are applied to ``x - y`` directly.
    """
    x, y = ad.as_tensor(x), ad.as_tensor(y, ad.as_tensor(x))
    _check_shapes(x, y, "perc_proxy")
    d = x - y
    half = ad.filter2d(d, _BINOMIAL5, stride=2)
    quarter = ad.filter2d(half, _BINOMIAL5, stride=2)
    gx = ad.filter2d(d, _SOBEL_X)
    gy = ad.filter2d(d, _SOBEL_Y)
    pyramid = ad.mean(ad.absolute(half)) + ad.mean(ad.absolute(quarter))
    edges = (ad.mean(ad.absolute(gx)) + ad.mean(ad.absolute(gy))) * 0.5
    return pyramid + edges


def rms(x, y) -> Tensor:
    d = ad.as_tensor(x) - y
    return ad.sqrt(ad.mean(ad.square(d)))


def photo_terms(composed, target, w: LossWeights) -> tuple[Tensor, Tensor]:
    composed = ad.as_tensor(composed)
    target = ad.as_tensor(target, composed)
    _check_shapes(composed, target, "loss_photo")
    l2 = rms(composed, target) * w.lambda_l2
    if w.lambda_perc == 0:
        return l2, ad.Tensor(np.zeros((), dtype=composed.dtype))
    return l2, perc_proxy(composed, target) * w.lambda_perc


def loss_photo(composed, target, w: LossWeights) -> Tensor:
    """``lambda_l2 * RMS(composed - target) + lambda_perc * perc_proxy``."""
    l2, perc = photo_terms(composed, target, w)
    return l2 + perc


@dataclass
class TargetView:
    """One supervised novel view: rendered tensors plus ground truth."""
    color: Tensor
    weight: Tensor
    image: np.ndarray


def supervised_image(view: TargetView, extrapolator, flags: AblationFlags):
    """The image the photometric loss sees, per the ablation flags.

    Returns ``(image, filled)``; ``filled`` is the extrapolator output or None.
    """
    if flags.no_extrapolation:
        return view.color, None
    if flags.no_composition:
        return extrapolator.fill(view.color, view.weight, flags.extrapolator_sees_weight), None
    rendered_in, weight_in = view.color, view.weight
    if flags.stop_gradient_routing:
        rendered_in, weight_in = ad.stop_gradient(rendered_in), ad.stop_gradient(weight_in)
    filled = extrapolator.fill(rendered_in, weight_in, flags.extrapolator_sees_weight)
    return compose(view.color, filled, view.weight), filled


def total_loss(mu_s, mu_t, targets, extrapolator, w: LossWeights, flags: AblationFlags) -> LossReport:
    """Teacher supervision plus novel-view supervision.

    ``mu_s`` / ``mu_t`` are one ``(H, W, 3)`` grid each or equal-length lists of
    grids (one per context view); teacher terms are averaged over context
    views and photometric terms over ``targets``.
    """
    flags.validate()
    if not isinstance(mu_s, (list, tuple)):
        mu_s, mu_t = [mu_s], [mu_t]
    if len(mu_s) != len(mu_t) or not mu_s:
        raise ad.ShapeError("need one teacher grid per student grid")
    mu_s = [ad.as_tensor(m) for m in mu_s]
    zero = ad.Tensor(np.zeros((), dtype=mu_s[0].dtype))
    geo = grad = zero
    if not flags.no_teacher:
        k = 1.0 / len(mu_s)
        for s, t in zip(mu_s, mu_t):
            geo = geo + loss_geo(s, t, w) * k
            if not flags.no_grad_match:
                grad = grad + loss_grad(s, t, w) * k
    l2 = perc = zero
    if targets:
        n = len(targets)
        for view in targets:
            img, _ = supervised_image(view, extrapolator, flags)
            a, b = photo_terms(img, view.image, w)
            l2 = l2 + a * (1.0 / n)
            perc = perc + b * (1.0 / n)
    total = geo + grad + l2 + perc
    return LossReport(geo.item(), grad.item(), l2.item(), perc.item(), total.item(), total)
