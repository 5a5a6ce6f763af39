"""R³S transformation of depth maps: Reshape, Reverse, Region Smoothing.

The outputs weight the two branches of the depth perception module: the
reversed map scales the non-local branch, the smoothed maps scale the 1×1,
3×3 and 5×5 local convolutions.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from errors import ConfigurationError, RangeError, ShapeError
from tensorcore import Tensor
from tensorcore.functional import nearest_indices

logger = logging.getLogger(__name__)

RANGE_TOLERANCE = 1e-6


@dataclass
class DepthMap:
    """Single-channel depth in [0, 1], shape (n, 1, H, W).

    near_is_zero records the convention: True means 0 = near, 1 = far.
    """
    data: np.ndarray
    near_is_zero: bool = True

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[None, None]
        if self.data.ndim != 4 or self.data.shape[1] != 1:
            raise ShapeError(f"DepthMap must have shape (n, 1, H, W), got {self.data.shape}")
        low, high = float(self.data.min()), float(self.data.max())
        if low < -RANGE_TOLERANCE or high > 1.0 + RANGE_TOLERANCE:
            raise RangeError(f"DepthMap values must lie in [0, 1], got [{low}, {high}]")

    @property
    def shape(self):
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @classmethod
    def from_tensor(cls, tensor: Tensor, near_is_zero: bool = True) -> "DepthMap":
        return cls(tensor.data.copy(), near_is_zero)

    def to_tensor(self) -> Tensor:
        return Tensor(self.data)

    def _derive(self, data: np.ndarray) -> "DepthMap":
        return DepthMap(data.astype(self.data.dtype, copy=False), self.near_is_zero)

    def in_convention(self, near_is_zero: bool) -> "DepthMap":
        """Same scene geometry expressed with the requested near/far convention"""
        if near_is_zero == self.near_is_zero:
            return self
        return DepthMap((1.0 - self.data).astype(self.data.dtype, copy=False), near_is_zero)


class R3SOutput(NamedTuple):
    d_rev: DepthMap
    d1: DepthMap
    d3: DepthMap
    d5: DepthMap


def reshape_nearest(d: DepthMap, h: int, w: int) -> DepthMap:
    """Nearest-neighbour resampling to the encoded feature scale; no value blending"""
    if h <= 0 or w <= 0:
        raise ConfigurationError(f"reshape target must be positive, got {h}x{w}")
    rows = nearest_indices(d.height, h)
    cols = nearest_indices(d.width, w)
    return d._derive(d.data[:, :, rows][:, :, :, cols])


def reverse(d: DepthMap) -> DepthMap:
    return d._derive(1.0 - d.data)


def region_smooth(d1: DepthMap, k: int) -> DepthMap:
    """Replace every k×k tile by its mean.

    Maps that k does not divide are replicate-padded on the right and bottom,
    smoothed, then cropped back to the original size.
    """
    if k <= 0:
        raise ConfigurationError(f"region size must be >= 1, got {k}")
    if k == 1:
        return d1._derive(d1.data.copy())
    n, _, h, w = d1.shape
    pad_h, pad_w = -h % k, -w % k
    padded = np.pad(d1.data.astype(np.float64), ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    th, tw = padded.shape[2] // k, padded.shape[3] // k
    tiles = padded.reshape(n, 1, th, k, tw, k)
    means = tiles.sum(axis=(3, 5)) / (k * k)
    smoothed = np.repeat(np.repeat(means, k, axis=2), k, axis=3)
    return d1._derive(smoothed[:, :, :h, :w])


def r3s(d: DepthMap, h: int, w: int) -> R3SOutput:
    d1 = reshape_nearest(d, h, w)
    return R3SOutput(d_rev=reverse(d1), d1=d1, d3=region_smooth(d1, 3), d5=region_smooth(d1, 5))
