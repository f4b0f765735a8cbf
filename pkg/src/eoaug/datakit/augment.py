"""Geometric resampling and the classical augmentation strategies.

One resampling convention is used everywhere: pixel centres sit at integer
coordinates, output pixel centres map back through the half-pixel rule, and
bilinear weights are taken from the four surrounding pixels. A sample point
inside the image extent (within half a pixel of the border) is clamped onto
the image; points outside it read zero.
"""

from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from ..errors import ContractError
from ..rng import SplitMix64

Range = Tuple[float, float]


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample a C x H x W image at fractional pixel coordinates (broadcast arrays)."""
    _, h, w = img.shape
    inside = (ys >= -0.5) & (ys <= h - 0.5) & (xs >= -0.5) & (xs <= w - 0.5)
    y = np.clip(ys, 0.0, h - 1.0)
    x = np.clip(xs, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bottom = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.where(inside, out, 0.0)


def _size2(size) -> Tuple[int, int]:
    return (size, size) if isinstance(size, (int, np.integer)) else (int(size[0]), int(size[1]))


def crop_resize(img: np.ndarray, top: float, left: float, height: float, width: float, out_size) -> np.ndarray:
    """Resample the box [top, top+height) x [left, left+width) (pixel-edge units) to ``out_size``."""
    oh, ow = _size2(out_size)
    ys = top + (np.arange(oh) + 0.5) * (height / oh) - 0.5
    xs = left + (np.arange(ow) + 0.5) * (width / ow) - 0.5
    return bilinear_sample(img, ys[:, None], xs[None, :])


def resize(img: np.ndarray, out_size) -> np.ndarray:
    _, h, w = img.shape
    return crop_resize(img, 0.0, 0.0, h, w, out_size)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def vflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def affine_warp(img: np.ndarray, matrix: np.ndarray, offset=(0.0, 0.0)) -> np.ndarray:
    """Inverse-map each output pixel about the image centre: src = M (dst - c) + c + offset.

    ``matrix`` acts on (x, y) column vectors.
    """
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    xs = matrix[0, 0] * dx + matrix[0, 1] * dy + cx + offset[0]
    ys = matrix[1, 0] * dx + matrix[1, 1] * dy + cy + offset[1]
    return bilinear_sample(img, ys, xs)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the centre with zero fill."""
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    # inverse of a counter-clockwise rotation in image (y-down) coordinates
    return affine_warp(img, np.array([[c, -s], [s, c]]))


def check_out_size(img: np.ndarray, out_size) -> None:
    oh, ow = _size2(out_size)
    _, h, w = img.shape
    if oh < 1 or ow < 1 or oh > 4 * h or ow > 4 * w:
        raise ContractError(f"output size {(oh, ow)} must be within 4x of the input {(h, w)}")


def rrc_params(rng: SplitMix64, h: int, w: int, scale: Range, ratio: Range) -> Tuple[int, int, int, int]:
    """Random resized crop box (top, left, height, width).

    Up to ten draws of (area fraction, log-uniform aspect); falls back to the
    largest centred box with an in-range aspect.
    """
    area = h * w
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(10):
        target = area * rng.uniform_range(scale[0], scale[1])
        aspect = math.exp(rng.uniform_range(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = rng.randint(0, h - ch)
            left = rng.randint(0, w - cw)
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(img: np.ndarray, out_size, rng: SplitMix64, scale: Range, ratio: Range) -> np.ndarray:
    _, h, w = img.shape
    top, left, ch, cw = rrc_params(rng, h, w, scale, ratio)
    return crop_resize(img, top, left, ch, cw, out_size)


def baseline(img: np.ndarray, out_size) -> np.ndarray:
    """No augmentation beyond resizing."""
    check_out_size(img, out_size)
    return resize(img, out_size)


def augment_basic(img: np.ndarray, out_size, rng: SplitMix64, scale: Range = (0.08, 1.0),
                  ratio: Range = (3 / 4, 4 / 3), flip_p: float = 0.5) -> np.ndarray:
    """Random resized crop, then horizontal flip with probability ``flip_p``."""
    check_out_size(img, out_size)
    out = random_resized_crop(img, out_size, rng, scale, ratio)
    if rng.random() < flip_p:
        out = hflip(out)
    return np.clip(out, 0.0, 1.0)


def augment_advanced(img: np.ndarray, out_size, rng: SplitMix64, hflip_p: float = 0.5, vflip_p: float = 0.5,
                     degrees: Range = (0.0, 360.0), scale: Range = (0.7, 1.0),
                     ratio: Range = (3 / 4, 4 / 3), angle: Optional[float] = None) -> np.ndarray:
    """Flips, a uniform rotation (zero fill), then random resized crop with a tighter scale range."""
    check_out_size(img, out_size)
    out = img
    if rng.random() < hflip_p:
        out = hflip(out)
    if rng.random() < vflip_p:
        out = vflip(out)
    theta = rng.uniform_range(degrees[0], degrees[1]) if angle is None else angle
    if theta % 360.0:
        out = rotate(out, theta)
    out = random_resized_crop(out, out_size, rng, scale, ratio)
    return np.clip(out, 0.0, 1.0)
