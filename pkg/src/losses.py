"""Training objectives.

Stage 1 supervises DEN (depth) and ASN (scene regression) jointly with L1
terms; stage 2 trains DGEN with a Charbonnier term plus an SSIM term. SSIM is
built from tape operations so it can be differentiated, and the metrics
module evaluates it under no_grad.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import windows

from errors import ConfigurationError, ShapeError
from tensorcore import Tensor
from tensorcore import functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    lambda1: float = 3.0
    lambda2: float = 0.5
    epsilon: float = 1e-3

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "epsilon"):
            value = getattr(self, name)
            if not value > 0:
                raise ConfigurationError(f"{name} must be strictly positive, got {value}")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def l1(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("l1", a, b)
    return F.mean_all(F.absolute(F.sub(a, b)))


def stage1_loss(d: Tensor, d_gt: Tensor, x_hat: Optional[Tensor], x: Tensor,
                weights: LossWeights = LossWeights()) -> Tensor:
    """λ₁·mean|d − d_gt| + mean|x̂ − x|; the scene term is dropped when ASN is disabled (x_hat None)"""
    loss = F.scale(l1(d, d_gt), weights.lambda1)
    if x_hat is not None:
        loss = F.add(loss, l1(x_hat, x))
    return loss


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    g = windows.gaussian(size, sigma)
    g = g / g.sum()
    return np.outer(g, g)


def ssim_map(x: Tensor, y: Tensor) -> Tensor:
    """Local SSIM for every valid window position, one map per (image, channel)"""
    _same_shape("ssim", x, y)
    n, c, h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ConfigurationError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    kernel = Tensor(gaussian_window()[None, None])
    planes_x = F.reshape(x, (n * c, 1, h, w))
    planes_y = F.reshape(y, (n * c, 1, h, w))

    def blur(t: Tensor) -> Tensor:
        return F.conv2d(t, kernel)

    mu_x, mu_y = blur(planes_x), blur(planes_y)
    mu_xy = F.mul(mu_x, mu_y)
    mu_xx, mu_yy = F.mul(mu_x, mu_x), F.mul(mu_y, mu_y)
    var_x = F.sub(blur(F.mul(planes_x, planes_x)), mu_xx)
    var_y = F.sub(blur(F.mul(planes_y, planes_y)), mu_yy)
    cov = F.sub(blur(F.mul(planes_x, planes_y)), mu_xy)

    numerator = F.mul(F.add_scalar(F.scale(mu_xy, 2.0), SSIM_C1), F.add_scalar(F.scale(cov, 2.0), SSIM_C2))
    denominator = F.mul(F.add_scalar(F.add(mu_xx, mu_yy), SSIM_C1), F.add_scalar(F.add(var_x, var_y), SSIM_C2))
    return F.div(numerator, denominator)


def ssim(x: Tensor, y: Tensor) -> Tensor:
    return F.mean_all(ssim_map(x, y))


def charbonnier(y: Tensor, y_gt: Tensor, epsilon: float) -> Tensor:
    _same_shape("charbonnier", y, y_gt)
    return F.mean_all(F.sqrt(F.add_scalar(F.square(F.sub(y, y_gt)), epsilon * epsilon)))


def stage2_loss(y: Tensor, y_gt: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    """mean sqrt((y − y_gt)² + ε²) + λ₂·(1 − SSIM(y, y_gt))"""
    structure = F.add_scalar(F.scale(ssim(y, y_gt), -weights.lambda2), weights.lambda2)
    return F.add(charbonnier(y, y_gt, weights.epsilon), structure)
