# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

"""
Shape prior training data: deformed ellipse patches, annotation patches and
synthetic scenes with ground truth.

A shape patch is a S_PATCH x S_PATCH float array in [0, 1]. Pixel ``j`` covers
the continuous interval [j, j + 1].
"""

from dataclasses import dataclass, field
import logging
import math
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import ShapePriorDataError, ShapePriorUsageError


LOG = logging.getLogger(__name__)

S_PATCH = 32
R_MAX_SHAPE = 3.0
MIN_FOREGROUND = 4
MIN_INSTANCE_AREA = 9
BACKGROUND = 0.2
NOISE_STD = 0.02


# ------------------------------------------------------------------------------
def rasterize_ellipse(
    shape: Tuple[int, int],
    cx: float,
    cy: float,
    a: float,
    b: float,
    angle: float = 0.0,
    supersample: int = 4,
) -> np.ndarray:
    """
    Pixel coverage of an ellipse, estimated with ``supersample`` x
    ``supersample`` points per pixel.

    :arg a:
        Semi-axis along the direction ``angle`` (degrees, 0 = along x).
    :arg b:
        The other semi-axis.
    """
    h, w = shape
    out = np.zeros(shape)
    reach = max(a, b) + 1.0
    r0 = max(int(math.floor(cy - reach)), 0)
    r1 = min(int(math.ceil(cy + reach)), h)
    c0 = max(int(math.floor(cx - reach)), 0)
    c1 = min(int(math.ceil(cx + reach)), w)
    if r0 >= r1 or c0 >= c1:
        return out
    sub = (np.arange(supersample) + 0.5) / supersample
    ys = (np.arange(r0, r1)[:, None] + sub[None, :]).ravel()
    xs = (np.arange(c0, c1)[:, None] + sub[None, :]).ravel()
    dy, dx = np.meshgrid(ys - cy, xs - cx, indexing="ij")
    t = math.radians(angle)
    u = dx * math.cos(t) + dy * math.sin(t)
    v = -dx * math.sin(t) + dy * math.cos(t)
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    cover = inside.reshape(r1 - r0, supersample, c1 - c0, supersample).mean(axis=(1, 3))
    out[r0:r1, c0:c1] = cover
    return out


# ------------------------------------------------------------------------------
def touches_border(patch: np.ndarray, threshold: float = 0.5) -> bool:
    fg = patch > threshold
    return bool(fg[0].any() or fg[-1].any() or fg[:, 0].any() or fg[:, -1].any())


def fit_to_patch(
    mask: np.ndarray, size: int = S_PATCH, margin: float = 0.1
) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    """
    Center the foreground of ``mask`` in a square ``size`` x ``size`` patch with
    ``margin`` of the side left free on every border.

    :returns:
        The patch and the square it was sampled from, as (top, left, side) in
        continuous coordinates of ``mask``.
    :raises ShapePriorDataError:
        If the mask has no foreground.
    """
    fg = np.nonzero(mask > 0.5)
    if len(fg[0]) == 0:
        raise ShapePriorDataError("cannot fit an empty mask")
    r0, r1 = fg[0].min(), fg[0].max() + 1
    c0, c1 = fg[1].min(), fg[1].max() + 1
    side = max(r1 - r0, c1 - c0) / (1.0 - 2.0 * margin)
    top = (r0 + r1) / 2.0 - side / 2.0
    left = (c0 + c1) / 2.0 - side / 2.0
    step = side / size
    rows = top + (np.arange(size) + 0.5) * step - 0.5
    cols = left + (np.arange(size) + 0.5) * step - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    patch = ndimage.map_coordinates(
        mask.astype(np.float64), [rr, cc], order=1, mode="constant", cval=0.0
    )
    return np.clip(patch, 0.0, 1.0), (top, left, side)


def paste_patch(
    patch: np.ndarray, box: Tuple[float, float, float], shape: Tuple[int, int]
) -> np.ndarray:
    """
    Inverse of `fit_to_patch`: the binary mask of ``patch`` placed back at
    ``box`` in an image of the given shape.
    """
    top, left, side = box
    size = patch.shape[0]
    h, w = shape
    scale = size / side
    rows = ((np.arange(h) + 0.5) - top) * scale - 0.5
    cols = ((np.arange(w) + 0.5) - left) * scale - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    values = ndimage.map_coordinates(
        patch, [rr, cc], order=1, mode="constant", cval=0.0
    )
    return values > 0.5


# ------------------------------------------------------------------------------
def gen_ellipse_patch(
    a_over_b: float,
    angle: float,
    fill_fraction: float = 0.8,
    rng: Optional[np.random.Generator] = None,
    size: int = S_PATCH,
    r_max_shape: float = R_MAX_SHAPE,
) -> np.ndarray:
    """
    Ellipse centered in a patch, its major axis spanning ``fill_fraction`` of the
    patch side. With ``rng`` the center is jittered by up to half a pixel.

    :raises ShapePriorUsageError:
        If the axis ratio or the fill fraction is out of range.
    """
    if not 1.0 <= a_over_b <= r_max_shape:
        raise ShapePriorUsageError(
            "axis ratio %r outside [1, %g]" % (a_over_b, r_max_shape)
        )
    if not 0.2 <= fill_fraction <= 0.9:
        raise ShapePriorUsageError(
            "fill fraction %r outside [0.2, 0.9]" % fill_fraction
        )
    a = fill_fraction * size / 2.0
    b = a / a_over_b
    cx = cy = size / 2.0
    if rng is not None:
        cx += rng.uniform(-0.5, 0.5)
        cy += rng.uniform(-0.5, 0.5)
    return rasterize_ellipse((size, size), cx, cy, a, b, angle)


def _displace(img: np.ndarray, alpha: float, sigma: float, rng: np.random.Generator):
    shape = img.shape
    dx = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, shape), sigma, mode="constant")
    dy = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, shape), sigma, mode="constant")
    norm = np.sqrt(dx * dx + dy * dy).max()
    if norm > 0:
        dx *= alpha / norm
        dy *= alpha / norm
    rr, cc = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    out = ndimage.map_coordinates(
        img, [rr + dy, cc + dx], order=1, mode="constant", cval=0.0
    )
    return np.clip(out, 0.0, 1.0)


def elastic_deform(
    patch: np.ndarray, alpha: float, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """
    Random elastic deformation: a uniform random displacement field per axis is
    smoothed by a Gaussian of width ``sigma`` and scaled so the largest
    displacement is ``alpha`` pixels; the patch is resampled bilinearly.

    A result touching the border is refitted into the patch.
    """
    if sigma < 1:
        raise ShapePriorUsageError("elastic sigma must be >= 1: %r" % sigma)
    if alpha < 0:
        raise ShapePriorUsageError("elastic alpha must be >= 0: %r" % alpha)
    if alpha == 0:
        return patch.copy()
    out = _displace(patch, alpha, sigma, rng)
    if (out > 0.5).sum() < MIN_FOREGROUND:
        LOG.debug("elastic deformation erased the shape, keeping the original")
        return patch.copy()
    if touches_border(out):
        out, _ = fit_to_patch(out, patch.shape[0])
    return out


def augment_rotations(patch: np.ndarray, step: float = 30) -> List[np.ndarray]:
    """
    Rotations of ``patch`` about its center by every multiple of ``step``
    degrees.
    """
    if step <= 0 or 360 % step:
        raise ShapePriorUsageError("rotation step must divide 360: %r" % step)
    out = []
    for k in range(int(360 // step)):
        if k == 0:
            rot = patch.copy()
        else:
            rot = ndimage.rotate(
                patch, k * step, reshape=False, order=1, mode="constant", cval=0.0
            )
            rot = np.clip(rot, 0.0, 1.0)
            if touches_border(rot):
                rot, _ = fit_to_patch(rot, patch.shape[0])
        out.append(rot)
    return out


def gen_shape_dataset(
    n: int,
    r_max_shape: float,
    alpha: float = 2.0,
    sigma: float = 4.0,
    rng: Optional[np.random.Generator] = None,
    fill_fraction: float = 0.8,
) -> List[np.ndarray]:
    """
    ``n`` elastically deformed ellipses, axis ratio uniform in
    [1, r_max_shape] and angle uniform in [0, 360).
    """
    if n < 1:
        raise ShapePriorUsageError("shape dataset size must be >= 1: %r" % n)
    if rng is None:
        rng = np.random.default_rng(0)
    patches = []
    for _ in range(n):
        ratio = rng.uniform(1.0, r_max_shape)
        angle = rng.uniform(0.0, 360.0)
        p = gen_ellipse_patch(
            ratio, angle, fill_fraction, rng, r_max_shape=max(r_max_shape, 1.0)
        )
        patches.append(elastic_deform(p, alpha, sigma, rng))
    LOG.debug("generated %d shapes, ratio <= %g", n, r_max_shape)
    return patches


# ------------------------------------------------------------------------------
def annotation_crops(
    labels: np.ndarray, size: int = S_PATCH, margin: float = 0.1
) -> Iterator[Tuple[int, np.ndarray, Tuple[float, float, float]]]:
    """
    Yield (instance id, patch, source box) for every instance of a label map
    that does not touch the image border.

    :raises ShapePriorDataError:
        If the label map has no instance.
    """
    labels = np.asarray(labels)
    if labels.max(initial=0) <= 0:
        raise ShapePriorDataError("label map has no instances")
    h, w = labels.shape
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        rs, cs = sl
        if rs.start == 0 or cs.start == 0 or rs.stop == h or cs.stop == w:
            LOG.debug("skipping instance %d touching the image border", i)
            continue
        patch, box = fit_to_patch((labels == i).astype(np.float64), size, margin)
        if (patch > 0.5).sum() < MIN_FOREGROUND:
            LOG.debug("skipping instance %d, too small", i)
            continue
        yield i, patch, box


def extract_annotation_patches(
    labels: np.ndarray, size: int = S_PATCH, margin: float = 0.1
) -> List[np.ndarray]:
    """
    Shape patches of the annotated instances: tight box, squared, resampled with
    a 10% margin. Instances touching the image border are skipped.
    """
    patches = [p for _, p, _ in annotation_crops(labels, size, margin)]
    if not patches:
        LOG.warning("all instances touch the image border, no patch extracted")
    return patches


def augment_patches(
    patches: List[np.ndarray],
    step: float = 30,
    copies: int = 1,
    alpha: float = 2.0,
    sigma: float = 4.0,
    rng: Optional[np.random.Generator] = None,
) -> List[np.ndarray]:
    """
    Every rotation of every patch, followed by ``copies`` elastic variants of
    that rotation.
    """
    if copies < 0:
        raise ShapePriorUsageError("augmentation copies must be >= 0: %r" % copies)
    if rng is None:
        rng = np.random.default_rng(0)
    out = []
    for p in patches:
        for rot in augment_rotations(p, step):
            out.append(rot)
            for _ in range(copies):
                out.append(elastic_deform(rot, alpha, sigma, rng))
    return out


# ------------------------------------------------------------------------------
@dataclass
class SceneSample:
    image: np.ndarray
    labels: np.ndarray
    meta: List[Dict[str, Any]] = field(default_factory=list)
    params: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_instances(self) -> int:
        return int(self.labels.max(initial=0))


def _instance_meta(
    labels: np.ndarray, rendered: Dict[int, int]
) -> List[Dict[str, Any]]:
    meta = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        area = int((labels[sl] == i).sum())
        meta.append(
            {
                "id": i,
                "box": [sl[1].start, sl[0].start, sl[1].stop, sl[0].stop],
                "area": area,
                "occluded": area < rendered.get(i, area),
            }
        )
    return meta


def gen_toy_scene(
    k: int,
    s_range: Tuple[float, float] = (1.0, 2.0),
    r_max_shape: float = 1.5,
    contrast: float = 0.6,
    rng: Optional[np.random.Generator] = None,
    size: Tuple[int, int] = (256, 256),
    s_cell: int = 16,
    alpha: float = 2.0,
    sigma: float = 4.0,
) -> SceneSample:
    """
    Synthetic scene of up to ``k`` deformed ellipses on a noisy background.

    Instance sizes are uniform in ``s_range`` cells (geometric mean of the axes).
    Centers are at least 0.7 mean diameters apart; an instance that cannot be
    placed within 1000 tries is dropped. Overlaps go to the later instance.
    Instances left with fewer than 9 pixels are removed and ids are made
    contiguous.
    """
    if k < 1:
        raise ShapePriorUsageError("scene needs at least one instance: %r" % k)
    if rng is None:
        rng = np.random.default_rng(0)
    h, w = size
    s_min, s_max = s_range
    min_dist = 0.7 * (s_min + s_max) / 2.0 * s_cell
    image = np.full(size, BACKGROUND)
    labels = np.zeros(size, dtype=np.int64)
    centers: List[Tuple[float, float]] = []
    rendered: Dict[int, int] = {}
    level = BACKGROUND + contrast

    for _ in range(k):
        diameter = rng.uniform(s_min, s_max) * s_cell
        ratio = rng.uniform(1.0, r_max_shape)
        a = diameter * math.sqrt(ratio) / 2.0
        b = diameter / math.sqrt(ratio) / 2.0
        angle = rng.uniform(0.0, 360.0)
        reach = a + alpha + 1.0
        for _ in range(1000):
            cx = rng.uniform(reach, w - reach)
            cy = rng.uniform(reach, h - reach)
            if all(math.hypot(cx - x, cy - y) >= min_dist for x, y in centers):
                break
        else:
            LOG.warning(
                "could not place instance %d, scene gets fewer", len(centers) + 1
            )
            break
        centers.append((cx, cy))

        # render in a local window, deform, then paint over the scene
        half = int(math.ceil(reach)) + 4
        r0 = int(math.floor(cy)) - half
        c0 = int(math.floor(cx)) - half
        win = rasterize_ellipse((2 * half, 2 * half), cx - c0, cy - r0, a, b, angle)
        if alpha > 0:
            win = _displace(win, alpha, sigma, rng)
        rs = slice(max(r0, 0), min(r0 + 2 * half, h))
        cs = slice(max(c0, 0), min(c0 + 2 * half, w))
        cover = win[rs.start - r0 : rs.stop - r0, cs.start - c0 : cs.stop - c0]
        image[rs, cs] = image[rs, cs] * (1.0 - cover) + level * cover
        idx = len(centers)
        labels[rs, cs][cover > 0.5] = idx
        rendered[idx] = int((cover > 0.5).sum())

    image = np.clip(image + rng.normal(0.0, NOISE_STD, size), 0.0, 1.0)

    # drop slivers and relabel contiguously
    areas = np.bincount(labels.ravel())
    keep = [i for i in range(1, len(areas)) if areas[i] >= MIN_INSTANCE_AREA]
    remap = np.zeros(len(areas), dtype=np.int64)
    remap[keep] = np.arange(1, len(keep) + 1)
    labels = remap[labels]
    rendered = {int(remap[i]): rendered[i] for i in keep}

    return SceneSample(
        image=image,
        labels=labels,
        meta=_instance_meta(labels, rendered),
        params={
            "k": k,
            "s_range": list(s_range),
            "r_max_shape": r_max_shape,
            "contrast": contrast,
            "alpha": alpha,
            "sigma": sigma,
        },
    )


def gen_benchmark(
    n_scenes: int,
    k_range: Tuple[int, int] = (5, 15),
    rng: Optional[np.random.Generator] = None,
    **scene_args,
) -> List[SceneSample]:
    """
    ``n_scenes`` toy scenes with a number of instances uniform in ``k_range``
    (inclusive).
    """
    if n_scenes < 1:
        raise ShapePriorUsageError("benchmark needs at least one scene: %r" % n_scenes)
    lo, hi = k_range
    if lo < 1 or hi < lo:
        raise ShapePriorUsageError("invalid instance range %r" % (k_range,))
    if rng is None:
        rng = np.random.default_rng(0)
    return [
        gen_toy_scene(int(rng.integers(lo, hi + 1)), rng=rng, **scene_args)
        for _ in range(n_scenes)
    ]
