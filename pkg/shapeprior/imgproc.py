# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

"""
Non-learned image processing: gradient maps, equalization, truncation, and the
differentiable gradient map of decoded patches.
"""

import logging
from typing import Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from . import ndgrad
from .errors import ShapePriorDataError, ShapePriorUsageError


LOG = logging.getLogger(__name__)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
# magnitude of the response to an ideal unit step
STEP_RESPONSE = 4.0


# ------------------------------------------------------------------------------
def load_gray(path: str) -> np.ndarray:
    """
    Read a PNG as a float image in [0, 1].

    8-bit images are divided by 255, 16-bit images by their own maximum.
    Multi-channel images are averaged over their color channels.

    :raises ShapePriorDataError:
        If the file cannot be decoded.
    """
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode in ("RGB", "RGBA", "P", "LA", "CMYK"):
                im = im.convert("RGB")
            data = np.array(im)
    except (OSError, ValueError) as e:
        raise ShapePriorDataError("cannot read image %s: %s" % (path, e)) from None

    if data.ndim == 3:
        data = data[..., :3].astype(np.float64).mean(axis=-1)
        return data / 255.0
    if data.dtype == np.uint8:
        return data.astype(np.float64) / 255.0
    data = data.astype(np.float64)
    top = data.max()
    if top > 0:
        data = data / top
    LOG.debug("%s: %s image %dx%d normalized by %g", path, mode, *data.shape, top)
    return data


def load_labels(path: str) -> np.ndarray:
    """
    Read a label PNG (pixel value = instance id) as an int64 array.
    """
    try:
        with Image.open(path) as im:
            data = np.array(im)
    except (OSError, ValueError) as e:
        raise ShapePriorDataError("cannot read labels %s: %s" % (path, e)) from None
    if data.ndim != 2:
        raise ShapePriorDataError("%s: label image must have a single channel" % path)
    return data.astype(np.int64)


def save_gray(path: str, img: np.ndarray) -> None:
    data = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def save_labels(path: str, labels: np.ndarray) -> None:
    if labels.max(initial=0) > 65535 or labels.min(initial=0) < 0:
        raise ShapePriorDataError("label ids do not fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path)


# ------------------------------------------------------------------------------
def resize(img: np.ndarray, size: Tuple[int, int], order: int = 1) -> np.ndarray:
    """
    Resample an image to ``size`` (height, width) with pixel-center alignment.

    :arg order:
        1 for bilinear (images), 0 for nearest neighbour (label maps).
    """
    h, w = img.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return img.copy()
    rows = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    cols = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    if order == 0:
        rr = np.clip(np.floor(rr + 0.5), 0, h - 1).astype(np.int64)
        cc = np.clip(np.floor(cc + 0.5), 0, w - 1).astype(np.int64)
        return img[rr, cc]
    return ndimage.map_coordinates(
        img.astype(np.float64), [rr, cc], order=order, mode="nearest"
    )


# ------------------------------------------------------------------------------
def sobel_gradient_map(img: np.ndarray) -> np.ndarray:
    """
    Sobel gradient magnitude with replicate borders, normalized to a maximum of
    1. A constant image gives an all-zero map.

    :raises ShapePriorDataError:
        If the image is smaller than 3x3.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ShapePriorDataError("gradient map needs a 2-d image of at least 3x3")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    mag = np.hypot(gx, gy)
    top = mag.max()
    if top <= 1e-12:
        return np.zeros_like(mag)
    return mag / top


def equalize_clip(img: np.ndarray, factor: float = 1.2) -> np.ndarray:
    """
    Clip at ``factor`` times the image mean, then stretch linearly to [0, 1].
    """
    if factor <= 0:
        raise ShapePriorUsageError("equalization factor must be positive: %r" % factor)
    img = np.asarray(img, dtype=np.float64)
    if not img.any():
        return img.copy()
    clipped = np.minimum(img, factor * img.mean())
    lo = clipped.min()
    hi = clipped.max()
    if hi - lo <= 0:
        return clipped
    return (clipped - lo) / (hi - lo)


def truncate_normalize(g: np.ndarray, fraction: float = 0.8) -> np.ndarray:
    """
    Clip a gradient map at ``fraction`` times its maximum and divide by the clip
    value.
    """
    if not 0 < fraction <= 1:
        raise ShapePriorUsageError(
            "truncation fraction must be in (0, 1]: %r" % fraction
        )
    g = np.asarray(g, dtype=np.float64)
    top = g.max(initial=0.0)
    if top <= 0:
        return g.copy()
    clip = fraction * top
    return np.minimum(g, clip) / clip


# ------------------------------------------------------------------------------
def preprocess(
    img: np.ndarray,
    size: Tuple[int, int] = (256, 256),
    equalize: bool = False,
    factor: float = 1.2,
) -> np.ndarray:
    out = resize(img, size, order=1)
    if equalize:
        out = equalize_clip(out, factor)
    return np.clip(out, 0.0, 1.0)


def target_gradient_map(img: np.ndarray, fraction: float = 0.8) -> np.ndarray:
    return truncate_normalize(sobel_gradient_map(img), fraction)


# ------------------------------------------------------------------------------
def sobel_tensor(x: ndgrad.Tensor) -> ndgrad.Tensor:
    """
    Differentiable gradient map of a N,1,h,w batch of soft masks.

    The magnitude is divided by the response of a unit step and capped at 1, so
    patch maps are in [0, 1] like image gradient maps.
    """
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapePriorDataError(
            "sobel_tensor needs a N,1,h,w tensor: %s" % (x.shape,)
        )
    kernel = ndgrad.Tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None])
    both = ndgrad.conv2d(ndgrad.pad_edge(x, 1), kernel)
    summed = ndgrad.conv2d(both.square(), ndgrad.Tensor(np.ones((1, 2, 1, 1))))
    mag = (summed + 1e-6).sqrt() * (1.0 / STEP_RESPONSE)
    return ndgrad.minimum(mag, ndgrad.ones(mag.shape))
