"""Image quality metrics.

Referenced metrics (need ground truth): MSE, PSNR, SSIM.
No-reference underwater metrics: UICM (colorfulness), UISM (sharpness),
UIConM (contrast) and their weighted sum UIQM.

Images are float arrays in [0, 1] shaped (3, H, W) or (1, 3, H, W); the
no-reference metrics work on the [0, 255] scale internally.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

import losses
from errors import ShapeError
from tensorcore import Tensor, no_grad, precision

logger = logging.getLogger(__name__)

UIQM_WEIGHTS = (0.0282, 0.2953, 3.5753)
UICM_WEIGHTS = (-0.0268, 0.1586)
UISM_CHANNEL_WEIGHTS = (0.299, 0.587, 0.114)
TRIM_ALPHA = 0.1
BLOCK_SIZE = 8

COLUMNS = ("psnr", "mse", "ssim", "uicm", "uism", "uiconm", "uiqm")


def _pair(x: np.ndarray, y: np.ndarray, op: str) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} differ")
    return x, y


def _rgb(x: np.ndarray, op: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise TypeError(f"{op} needs a 3-channel image (3, H, W), got shape {x.shape}")
    return x


def mse(x: np.ndarray, y: np.ndarray) -> float:
    x, y = _pair(x, y, "mse")
    return float(np.mean((x - y) ** 2))


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """10·log10(1/mse); identical images give math.inf"""
    error = mse(x, y)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / error)


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    x, y = _pair(x, y, "ssim")
    if x.ndim == 3:
        x, y = x[None], y[None]
    with precision(np.float64), no_grad():
        return losses.ssim(Tensor(x), Tensor(y)).item()


# ---------------------------------------------------------------------------
# No-reference metrics

def trimmed_mean(values: np.ndarray, alpha_l: float = TRIM_ALPHA, alpha_r: float = TRIM_ALPHA) -> float:
    """Asymmetric α-trimmed mean: drop ceil(α_L·K) lowest and floor(α_R·K) highest samples.

    Samples too few to survive the trim fall back to the plain mean.
    """
    ordered = np.sort(np.ravel(values))
    k = ordered.size
    low = math.ceil(alpha_l * k)
    high = math.floor(alpha_r * k)
    if low >= k - high:
        return float(np.mean(ordered))
    kept = ordered[low:k - high]
    return float(np.sum(kept) / kept.size)


def trimmed_variance(values: np.ndarray, mu: float) -> float:
    values = np.ravel(values)
    return float(np.sum((values - mu) ** 2) / values.size)


def uicm(x: np.ndarray) -> float:
    img = _rgb(x, "uicm") * 255.0
    r, g, b = img
    rg = r - g
    yb = (r + g) / 2.0 - b
    mu_rg, mu_yb = trimmed_mean(rg), trimmed_mean(yb)
    chroma = math.sqrt(mu_rg ** 2 + mu_yb ** 2)
    spread = math.sqrt(trimmed_variance(rg, mu_rg) + trimmed_variance(yb, mu_yb))
    return UICM_WEIGHTS[0] * chroma + UICM_WEIGHTS[1] * spread


def pad_to_blocks(x: np.ndarray, block: int = BLOCK_SIZE) -> np.ndarray:
    """Replicate the last row/column so H and W become multiples of block"""
    h, w = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(0, -h % block), (0, -w % block)]
    return np.pad(x, pad, mode="edge")


def _blocks(x: np.ndarray, block: int) -> np.ndarray:
    """(..., H, W) -> (..., H/b, W/b, b·b)"""
    *lead, h, w = x.shape
    tiles = x.reshape(*lead, h // block, block, w // block, block)
    return np.moveaxis(tiles, -3, -2).reshape(*lead, h // block, w // block, block * block)


def sobel_magnitude(channel: np.ndarray) -> np.ndarray:
    dx = ndimage.sobel(channel, 0)
    dy = ndimage.sobel(channel, 1)
    magnitude = np.hypot(dx, dy)
    peak = magnitude.max()
    if peak == 0:
        return magnitude
    return magnitude * (255.0 / peak)


def eme(channel: np.ndarray, block: int = BLOCK_SIZE) -> float:
    """(2 / k1k2) Σ log(max/min) over blocks; blocks with a zero extreme or max = min add 0"""
    tiles = _blocks(channel, block)
    hi, lo = tiles.max(axis=-1), tiles.min(axis=-1)
    valid = (lo > 0) & (hi > 0) & (hi != lo)
    ratios = np.ones_like(hi)
    ratios[valid] = hi[valid] / lo[valid]
    return float(2.0 / hi.size * np.sum(np.log(ratios)))


def uism(x: np.ndarray) -> float:
    img = pad_to_blocks(_rgb(x, "uism")) * 255.0
    total = 0.0
    for weight, channel in zip(UISM_CHANNEL_WEIGHTS, img):
        total += weight * eme(sobel_magnitude(channel) * channel)
    return total


def uiconm(x: np.ndarray, block: int = BLOCK_SIZE) -> float:
    """logAMEE: -(1 / k1k2) Σ r·log r with r = (max − min)/(max + min) over 3-channel blocks"""
    img = pad_to_blocks(_rgb(x, "uiconm")) * 255.0
    tiles = _blocks(img, block)                                # (3, k2, k1, b·b)
    hi, lo = tiles.max(axis=(0, -1)), tiles.min(axis=(0, -1))
    top, bottom = hi - lo, hi + lo
    valid = (top != 0) & (bottom != 0)
    terms = np.zeros_like(hi)
    ratio = top[valid] / bottom[valid]
    terms[valid] = ratio * np.log(ratio)
    return float(-np.sum(terms) / hi.size)


@dataclass
class UIQMComponents:
    uicm: float
    uism: float
    uiconm: float

    @property
    def uiqm(self) -> float:
        c1, c2, c3 = UIQM_WEIGHTS
        return c1 * self.uicm + c2 * self.uism + c3 * self.uiconm


def uiqm_components(x: np.ndarray) -> UIQMComponents:
    return UIQMComponents(uicm(x), uism(x), uiconm(x))


def uiqm(x: np.ndarray) -> float:
    return uiqm_components(x).uiqm


# ---------------------------------------------------------------------------
# Reports

@dataclass
class ImageMetrics:
    image: str
    uicm: float
    uism: float
    uiconm: float
    uiqm: float
    psnr: Optional[float] = None
    mse: Optional[float] = None
    ssim: Optional[float] = None

    def value(self, column: str) -> Optional[float]:
        return getattr(self, column)


def evaluate_pair(image_id: str, y: np.ndarray, gt: Optional[np.ndarray] = None) -> ImageMetrics:
    parts = uiqm_components(y)
    row = ImageMetrics(image_id, parts.uicm, parts.uism, parts.uiconm, parts.uiqm)
    if gt is not None:
        row.mse = mse(y, gt)
        row.psnr = psnr(y, gt)
        row.ssim = ssim(y, gt)
    return row


def _format(value: Optional[float]) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(float(value))


@dataclass
class MetricReport:
    rows: List[ImageMetrics] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)

    def add(self, row: ImageMetrics) -> None:
        self.rows.append(row)

    def skip(self, image: str, reason: str) -> None:
        logger.warning("skipping %s: %s", image, reason)
        self.skipped.append((image, reason))

    def means(self) -> Dict[str, Optional[float]]:
        result: Dict[str, Optional[float]] = {}
        for column in COLUMNS:
            values = [row.value(column) for row in self.rows if row.value(column) is not None]
            result[column] = float(np.mean(values)) if values else None
        return result

    def to_csv(self) -> str:
        lines = ["image," + ",".join(COLUMNS)]
        for row in self.rows:
            lines.append(",".join([row.image] + [_format(row.value(c)) for c in COLUMNS]))
        means = self.means()
        lines.append(",".join(["MEAN"] + [_format(means[c]) for c in COLUMNS]))
        for image, reason in self.skipped:
            lines.append(f"# skipped {image}: {reason}")
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_csv())
        logger.info("wrote metric report %s (%d images, %d skipped)", path, len(self.rows), len(self.skipped))
