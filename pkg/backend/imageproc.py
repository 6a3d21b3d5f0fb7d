# ======================================================
# backend/imageproc.py
# Frame preprocessing and marker segmentation
#
# Chain per frame:
#   blur → circular mask → sharpen → grayscale
#   → dual-threshold extraction (black / white markers)
#   → open + close → 8-connected components → weighted centroids
#
# All convolutions clamp to edge.
# ======================================================

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import cv2
import numpy as np

from backend.errors import DimensionMismatchError, OverSegmentationError

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])

BLACK = "black"
WHITE = "white"


# ======================================================
# TYPES
# ======================================================

@dataclass
class Frame:
    """Row-major RGB frame, 8 bits per channel."""
    pixels: np.ndarray
    index: int = 0

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DimensionMismatchError(f"RGB frame expected, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise DimensionMismatchError(f"8-bit frame expected, got {self.pixels.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class GrayFrame:
    """Row-major 8-bit luminance."""
    pixels: np.ndarray
    index: int = 0

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise DimensionMismatchError(f"gray frame expected, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise DimensionMismatchError(f"8-bit frame expected, got {self.pixels.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class MarkerSet:
    kind: str
    centroids: np.ndarray   # (N, 2) x, y px
    areas: np.ndarray       # (N,) px²

    def __len__(self):
        return len(self.centroids)


Image = Union[Frame, GrayFrame, np.ndarray]


# ======================================================
# HELPERS
# ======================================================

def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def _apply(img: Image, fn, clamp: bool = True):
    """
    Run a float filter over an image and return the input's type.
    Plain arrays stay float (no rounding); frames are rounded to 8 bits.
    """
    if isinstance(img, (Frame, GrayFrame)):
        out = fn(img.pixels.astype(np.float32))
        return type(img)(_to_uint8(out), img.index)
    out = fn(np.asarray(img, dtype=float))
    return np.clip(out, 0, 255) if clamp else out


def _gaussian(values: np.ndarray, sigma: float) -> np.ndarray:
    k = 2 * int(np.ceil(3 * sigma)) + 1
    return cv2.GaussianBlur(values, (k, k), sigma, sigmaY=sigma, borderType=cv2.BORDER_REPLICATE)


@lru_cache(maxsize=8)
def _disc(width: int, height: int) -> np.ndarray:
    vv, uu = np.mgrid[0:height, 0:width]
    r = height / 2.0
    inside = (uu - (width - 1) / 2.0) ** 2 + (vv - (height - 1) / 2.0) ** 2 <= r * r
    inside.setflags(write=False)
    return inside


@lru_cache(maxsize=8)
def _structuring_disc(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (xx * xx + yy * yy <= radius * radius).astype(np.uint8)


# ======================================================
# FILTERS
# ======================================================

def gaussian_blur(img: Image, sigma: float) -> Image:
    """Separable Gaussian, kernel radius ceil(3σ), borders clamped."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return _apply(img, lambda v: _gaussian(v, sigma), clamp=False)


def circular_mask(f: Frame) -> Frame:
    """Black out pixels outside the centred circle of diameter = height."""
    inside = _disc(f.width, f.height)
    out = np.where(inside[..., None], f.pixels, 0).astype(np.uint8)
    return Frame(out, f.index)


def mask_region(width: int, height: int) -> np.ndarray:
    """Pixels kept by circular_mask."""
    return _disc(width, height)


def sharpen(img: Image, amount: float, sigma: float) -> Image:
    """Unsharp mask: in + amount·(in − blur(in))."""
    if amount < 0:
        raise ValueError("amount must be non-negative")
    if amount == 0:
        return img
    return _apply(img, lambda v: v + amount * (v - _gaussian(v, sigma)), clamp=False)


def to_gray(f: Frame) -> GrayFrame:
    """ITU-R 601 luma (LUMA weights), rounded."""
    return GrayFrame(cv2.cvtColor(f.pixels, cv2.COLOR_RGB2GRAY), f.index)


# ======================================================
# MARKER SEGMENTATION
# ======================================================

def marker_mask(g: GrayFrame, kind: str, cfg) -> np.ndarray:
    """
    Binary marker pixels after the noise-removal morphology.
    """
    if cfg.t_low >= cfg.t_high:
        raise ValueError("t_low must be below t_high")

    if kind == BLACK:
        binary = g.pixels < cfg.t_low
    elif kind == WHITE:
        binary = g.pixels > cfg.t_high
    else:
        raise ValueError(f"unknown marker kind {kind!r}")

    if cfg.kernel_radius > 0:
        se = _structuring_disc(int(cfg.kernel_radius))
        cleaned = cv2.morphologyEx(binary.astype(np.uint8), cv2.MORPH_OPEN, se)
        cleaned = cv2.morphologyEx(cleaned, cv2.MORPH_CLOSE, se)
        binary = cleaned.astype(bool)
    return binary


def extract_markers(g: GrayFrame, kind: str, cfg) -> MarkerSet:
    """
    Threshold, clean, label (8-connected) and return intensity-weighted
    centroids of components whose area lies in [min_area, max_area].
    """
    binary = marker_mask(g, kind, cfg)
    n, labels, stats, _ = cv2.connectedComponentsWithStats(
        binary.astype(np.uint8), connectivity=8, ltype=cv2.CV_32S
    )
    count = n - 1

    if count > cfg.max_markers:
        raise OverSegmentationError(kind, count, cfg.max_markers)
    if count == 0:
        return MarkerSet(kind, np.zeros((0, 2)), np.zeros(0))

    values = g.pixels.astype(np.float64)
    if kind == BLACK:
        weights = np.maximum(cfg.t_low - values, 0.0)
    else:
        weights = np.maximum(values - cfg.t_high, 0.0)

    sel = labels > 0
    lab = labels[sel]
    vv, uu = np.nonzero(sel)
    w = weights[sel]

    area = stats[1:, cv2.CC_STAT_AREA].astype(float)
    wsum = np.bincount(lab, weights=w, minlength=n)[1:]
    wx = np.bincount(lab, weights=w * uu, minlength=n)[1:]
    wy = np.bincount(lab, weights=w * vv, minlength=n)[1:]

    keep = (area >= cfg.min_area) & (area <= cfg.max_area) & (wsum > 0)
    centroids = np.stack([wx[keep] / wsum[keep], wy[keep] / wsum[keep]], axis=1)

    log.debug("%s markers: %d components, %d kept", kind, count, int(keep.sum()))
    return MarkerSet(kind, centroids, area[keep])


def order_by_angle(centroids: np.ndarray, center) -> np.ndarray:
    """Indices ordering points by angle around ``center`` (ascending atan2)."""
    c = np.asarray(centroids, dtype=float).reshape(-1, 2)
    ang = np.arctan2(c[:, 1] - center[1], c[:, 0] - center[0])
    return np.argsort(ang, kind="stable")
