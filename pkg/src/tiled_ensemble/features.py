"""Hand-crafted patch embeddings used in place of a pretrained backbone.

Each ``cell_size x cell_size`` cell of a tile becomes one vector laid out as::

    [mean_c0 .. mean_cK, std_c0 .. std_cK, grad_bin_0 .. grad_bin_B]

The gradient bins hold the mean luminance-gradient magnitude per unsigned
orientation bin over ``[0, pi)``. Layout changes must bump ``FEATURE_VERSION``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

FEATURE_VERSION = 1

_LUMA_RGB = np.array([0.299, 0.587, 0.114])


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    cell_size: int = 8
    orientation_bins: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.cell_size < 1 or self.orientation_bins < 1 or self.channels < 1:
            raise FeatureError("cell_size, orientation_bins and channels must be >= 1")

    @property
    def dim(self) -> int:
        return 2 * self.channels + self.orientation_bins

    def fingerprint(self) -> bytes:
        """32-byte digest identifying the feature layout."""
        text = (f"tiled-ensemble-features/v{FEATURE_VERSION};cell={self.cell_size};"
                f"bins={self.orientation_bins};channels={self.channels}")
        return hashlib.sha256(text.encode()).digest()


def luminance(tile: np.ndarray) -> np.ndarray:
    if tile.shape[2] == 3:
        return tile @ _LUMA_RGB
    return tile.mean(axis=2)


def extract_features(tile: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Return a ``(grid_h, grid_w, dim)`` feature map for an ``(H, W, C)`` tile."""
    tile = np.asarray(tile, dtype=np.float64)
    if tile.ndim == 2:
        tile = tile[:, :, None]
    h, w, c = tile.shape
    cs = config.cell_size
    if h % cs or w % cs:
        raise FeatureError(f"tile {h}x{w} is not divisible by cell size {cs}")
    if c != config.channels:
        raise FeatureError(f"tile has {c} channels, feature config expects {config.channels}")
    gh, gw = h // cs, w // cs

    cells = tile.reshape(gh, cs, gw, cs, c)
    mean = cells.mean(axis=(1, 3))
    # variance of data shifted by each cell's first sample; exact zero for flat cells
    shifted = cells - cells[:, :1, :, :1, :]
    var = (shifted ** 2).mean(axis=(1, 3)) - shifted.mean(axis=(1, 3)) ** 2
    std = np.sqrt(np.maximum(var, 0.0))

    lum = luminance(tile)
    if h > 1 and w > 1:
        gy, gx = np.gradient(lum)
    else:
        gy = gx = np.zeros_like(lum)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = config.orientation_bins
    bin_idx = np.minimum((theta * (bins / np.pi)).astype(np.int64), bins - 1)
    hist = np.zeros((h, w, bins))
    np.put_along_axis(hist, bin_idx[:, :, None], mag[:, :, None], axis=2)
    hist = hist.reshape(gh, cs, gw, cs, bins).mean(axis=(1, 3))

    return np.concatenate([mean, std, hist], axis=2)
