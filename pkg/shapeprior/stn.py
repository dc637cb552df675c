# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

"""
Differentiable spatial transformer.

All transforms map normalized output coordinates to normalized source
coordinates. Both frames are [-1, 1]^2 with x to the right, y downwards and the
origin at the image center; pixel ``i`` of an axis of length ``n`` has its
center at ``2 * (i + 0.5) / n - 1``.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ndgrad
from .errors import ShapePriorDataError
from .ndgrad import Tensor


LOG = logging.getLogger(__name__)

CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


# ------------------------------------------------------------------------------
class BoxParams:
    """
    A batch of axis-aligned boxes, one per grid cell in row-major order.

    Cell centers are constants; offsets, sizes and presence are tensors so that
    gradients flow back to the network that predicted them. Pixel coordinates are
    continuous: the image spans [0, W] x [0, H] and pixel ``j`` covers
    [j, j + 1].
    """

    __slots__ = (
        "x_cell",
        "y_cell",
        "o_x",
        "o_y",
        "h_obj",
        "w_obj",
        "presence",
        "cells",
    )

    def __init__(
        self,
        x_cell: np.ndarray,
        y_cell: np.ndarray,
        o_x: Tensor,
        o_y: Tensor,
        h_obj: Tensor,
        w_obj: Tensor,
        presence: Tensor,
        cells: Optional[List[Tuple[int, int]]] = None,
    ):
        self.x_cell = np.asarray(x_cell, dtype=np.float64).reshape(-1)
        self.y_cell = np.asarray(y_cell, dtype=np.float64).reshape(-1)
        self.o_x = o_x
        self.o_y = o_y
        self.h_obj = h_obj
        self.w_obj = w_obj
        self.presence = presence
        n = len(self.x_cell)
        for t in (o_x, o_y, h_obj, w_obj, presence):
            if t.shape != (n,):
                raise ShapePriorDataError(
                    "box parameters must all have shape (%d,), got %s" % (n, t.shape)
                )
        self.cells = cells if cells is not None else [(0, i) for i in range(n)]

    @classmethod
    def from_values(
        cls,
        x_cell: float,
        y_cell: float,
        o_x: float,
        o_y: float,
        h_obj: float,
        w_obj: float,
        presence: float = 1.0,
        cell: Tuple[int, int] = (0, 0),
    ) -> "BoxParams":
        def one(v):
            return Tensor([v])

        return cls(
            [x_cell],
            [y_cell],
            one(o_x),
            one(o_y),
            one(h_obj),
            one(w_obj),
            one(presence),
            [cell],
        )

    @classmethod
    def concat(cls, boxes: Sequence["BoxParams"]) -> "BoxParams":
        """
        Constant batch made of several boxes. Gradient links are not kept.
        """

        def cat(attr):
            return Tensor(np.concatenate([getattr(b, attr).data for b in boxes]))

        return cls(
            np.concatenate([b.x_cell for b in boxes]),
            np.concatenate([b.y_cell for b in boxes]),
            cat("o_x"),
            cat("o_y"),
            cat("h_obj"),
            cat("w_obj"),
            cat("presence"),
            [c for b in boxes for c in b.cells],
        )

    def __len__(self) -> int:
        return len(self.x_cell)

    def select(self, i: int) -> "BoxParams":
        return BoxParams.from_values(
            self.x_cell[i],
            self.y_cell[i],
            float(self.o_x.data[i]),
            float(self.o_y.data[i]),
            float(self.h_obj.data[i]),
            float(self.w_obj.data[i]),
            float(self.presence.data[i]),
            self.cells[i],
        )

    def centers(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.x_cell + self.o_x.data, self.y_cell + self.o_y.data

    def pixel_boxes(self) -> np.ndarray:
        """
        N x 4 array of (x0, y0, x1, y1) in continuous pixel coordinates.
        """
        cx, cy = self.centers()
        hw = self.w_obj.data / 2.0
        hh = self.h_obj.data / 2.0
        return np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)

    def validate(self, s_cell: float, s_min: float, s_max: float, r_max: float) -> None:
        """
        Check the offset, scale and aspect-ratio ranges of every box.

        :raises ShapePriorDataError:
            If one box is out of range.
        """
        tol = 1e-4
        h = self.h_obj.data.astype(np.float64)
        w = self.w_obj.data.astype(np.float64)
        if np.any(h <= 0) or np.any(w <= 0):
            raise ShapePriorDataError("boxes must have a positive size")
        if np.any(np.abs(self.o_x.data) > 0.5 * s_cell * (1 + tol)) or np.any(
            np.abs(self.o_y.data) > 0.5 * s_cell * (1 + tol)
        ):
            raise ShapePriorDataError("box offset exceeds half a cell")
        side = np.sqrt(h * w)
        if np.any(side < s_min * s_cell * (1 - tol)) or np.any(
            side > s_max * s_cell * (1 + tol)
        ):
            raise ShapePriorDataError(
                "box scale outside [%g, %g] cells" % (s_min, s_max)
            )
        ratio = w / h
        if np.any(ratio > r_max * (1 + tol)) or np.any(ratio < (1 - tol) / r_max):
            raise ShapePriorDataError("box aspect ratio exceeds %g" % r_max)


# ------------------------------------------------------------------------------
class AffineTransform:
    """
    A batch of 2x3 matrices, as a N,2,3 tensor.
    """

    __slots__ = ("theta",)

    def __init__(self, theta: Union[Tensor, np.ndarray]):
        if not isinstance(theta, Tensor):
            theta = Tensor(theta)
        if theta.ndim == 2:
            theta = theta.reshape(1, 2, 3)
        if theta.ndim != 3 or theta.shape[1:] != (2, 3):
            raise ShapePriorDataError(
                "affine transforms must be N,2,3: %s" % (theta.shape,)
            )
        self.theta = theta

    @classmethod
    def identity(cls, n: int = 1) -> "AffineTransform":
        return cls(np.tile(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), (n, 1, 1)))

    def __len__(self) -> int:
        return self.theta.shape[0]

    def matrix(self, i: int = 0) -> np.ndarray:
        return self.theta.data[i].astype(np.float64)

    def homogeneous(self) -> np.ndarray:
        n = len(self)
        h = np.zeros((n, 3, 3))
        h[:, :2] = self.theta.data
        h[:, 2, 2] = 1.0
        return h

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """
        Matrix product ``self @ other``: apply ``other`` first. Constant result.
        """
        return AffineTransform((self.homogeneous() @ other.homogeneous())[:, :2])


# ------------------------------------------------------------------------------
def _normalized_box(box: BoxParams, img_size: Tuple[int, int]):
    h_img, w_img = img_size
    if np.any(box.h_obj.data <= 0) or np.any(box.w_obj.data <= 0):
        raise ShapePriorDataError("zero-size box")
    sx = box.w_obj * (1.0 / w_img)
    sy = box.h_obj * (1.0 / h_img)
    tx = (box.o_x + Tensor(box.x_cell)) * (2.0 / w_img) - 1.0
    ty = (box.o_y + Tensor(box.y_cell)) * (2.0 / h_img) - 1.0
    return sx, sy, tx, ty


def _assemble(n: int, entries: Sequence) -> AffineTransform:
    zero = ndgrad.zeros((n,))
    rows = [zero if e is None else e for e in entries]
    return AffineTransform(ndgrad.stack(rows, axis=1).reshape(n, 2, 3))


def crop_transform(box: BoxParams, img_size: Tuple[int, int]) -> AffineTransform:
    """
    Transform sampling the box region of an image into a patch.

    The scale is (W_obj / W_img, H_obj / H_img), the translation is the box
    center in normalized image coordinates.

    :raises ShapePriorDataError:
        For zero-size boxes.
    """
    sx, sy, tx, ty = _normalized_box(box, img_size)
    return _assemble(len(box), [sx, None, tx, None, sy, ty])


def stitch_transform(box: BoxParams, img_size: Tuple[int, int]) -> AffineTransform:
    """
    Inverse of `crop_transform`: samples a patch onto the image canvas.
    """
    sx, sy, tx, ty = _normalized_box(box, img_size)
    isx = 1.0 / sx
    isy = 1.0 / sy
    return _assemble(len(box), [isx, None, -tx * isx, None, isy, -ty * isy])


# ------------------------------------------------------------------------------
def normalized_centers(n: int) -> np.ndarray:
    return 2.0 * (np.arange(n) + 0.5) / n - 1.0


class _SampleCache:
    __slots__ = ("shape", "xo", "yo", "idx", "valid", "weights", "values")


def _sample(src: np.ndarray, theta: np.ndarray, xo: np.ndarray, yo: np.ndarray):
    """
    Bilinear sampling of ``src`` (B,C,H,W with B = 1 or N) at the points
    ``theta @ (xo, yo, 1)``; out of bounds corners read zero.

    :returns:
        (N,C,P) samples and the cache needed by `_sample_backward`.
    """
    b, c, h, w = src.shape
    n = theta.shape[0]
    if b not in (1, n):
        raise ShapePriorDataError(
            "cannot sample %d sources with %d transforms" % (b, n)
        )
    xo = np.broadcast_to(xo, (n, xo.shape[-1]))
    yo = np.broadcast_to(yo, (n, yo.shape[-1]))
    xs = theta[:, 0, 0, None] * xo + theta[:, 0, 1, None] * yo + theta[:, 0, 2, None]
    ys = theta[:, 1, 0, None] * xo + theta[:, 1, 1, None] * yo + theta[:, 1, 2, None]
    px = ((xs + 1.0) * w - 1.0) / 2.0
    py = ((ys + 1.0) * h - 1.0) / 2.0
    x0 = np.floor(px)
    y0 = np.floor(py)
    wx = px - x0
    wy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = src.reshape(b, c, h * w)

    cache = _SampleCache()
    cache.shape = src.shape
    cache.xo = xo
    cache.yo = yo
    cache.idx = []
    cache.valid = []
    cache.values = []
    cache.weights = [(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy]
    out = 0.0
    for (dy, dx), wk in zip(CORNERS, cache.weights):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0)
        if b == 1:
            v = flat[0][:, idx].transpose(1, 0, 2)
        else:
            v = np.take_along_axis(
                flat, np.broadcast_to(idx[:, None, :], (n, c, idx.shape[1])), axis=2
            )
        v = v * valid[:, None, :]
        cache.idx.append(idx)
        cache.valid.append(valid)
        cache.values.append(v)
        out = out + wk[:, None, :] * v
    return out, cache


def _sample_backward(
    cache: _SampleCache, g: np.ndarray, need_src: bool, need_theta: bool
):
    b, c, h, w = cache.shape
    n = g.shape[0]
    gsrc = gtheta = None
    if need_src:
        gsrc = np.zeros((b, c, h * w))
        for wk, idx, valid in zip(cache.weights, cache.idx, cache.valid):
            contrib = g * (wk * valid)[:, None, :]
            if b == 1:
                lin = idx.ravel()
                for ch in range(c):
                    gsrc[0, ch] += np.bincount(
                        lin, weights=contrib[:, ch, :].ravel(), minlength=h * w
                    )
            else:
                lin = (np.arange(n)[:, None] * (h * w) + idx).ravel()
                for ch in range(c):
                    gsrc[:, ch] += np.bincount(
                        lin, weights=contrib[:, ch, :].ravel(), minlength=n * h * w
                    ).reshape(n, h * w)
        gsrc = gsrc.reshape(b, c, h, w)
    if need_theta:
        v00, v01, v10, v11 = cache.values
        w00, w01, w10, w11 = cache.weights
        wx = w01 + w11
        wy = w10 + w11
        dpx = (1 - wy)[:, None] * (v01 - v00) + wy[:, None] * (v11 - v10)
        dpy = (1 - wx)[:, None] * (v10 - v00) + wx[:, None] * (v11 - v01)
        gx = (g * dpx).sum(axis=1) * (w / 2.0)
        gy = (g * dpy).sum(axis=1) * (h / 2.0)
        gtheta = np.empty((n, 2, 3))
        for row, gr in ((0, gx), (1, gy)):
            gtheta[:, row, 0] = (gr * cache.xo).sum(axis=1)
            gtheta[:, row, 1] = (gr * cache.yo).sum(axis=1)
            gtheta[:, row, 2] = gr.sum(axis=1)
    return gsrc, gtheta


# ------------------------------------------------------------------------------
def bilinear_sample(
    src: Tensor,
    transform: Union[AffineTransform, Tensor],
    out_size: Tuple[int, int],
) -> Tensor:
    """
    Sample ``src`` (1,C,H,W or N,C,H,W) through N transforms.

    :returns:
        A N,C,h,w tensor. Gradients flow to the source and to the transforms.
    """
    theta = transform.theta if isinstance(transform, AffineTransform) else transform
    if src.ndim != 4:
        raise ShapePriorDataError(
            "bilinear_sample needs a B,C,H,W source: %s" % (src.shape,)
        )
    oh, ow = out_size
    gx, gy = np.meshgrid(normalized_centers(ow), normalized_centers(oh))
    out, cache = _sample(src.data, theta.data, gx.ravel(), gy.ravel())
    n, c = out.shape[:2]

    def grad(g):
        return _sample_backward(
            cache, g.reshape(n, c, oh * ow), src.requires_grad, theta.requires_grad
        )

    return ndgrad.make_op(
        out.reshape(n, c, oh, ow), (src, theta), grad, "bilinear_sample"
    )


def crop_patches(image: Tensor, boxes: BoxParams, s_patch: int) -> Tensor:
    """
    Crop every box of a 1,1,H,W image into a N,1,s,s batch of patches.
    """
    t = crop_transform(boxes, image.shape[2:])
    return bilinear_sample(image, t, (s_patch, s_patch))


# ------------------------------------------------------------------------------
def _batch_patches(patches) -> Tensor:
    if isinstance(patches, Tensor):
        return patches
    parts = [p.reshape(p.shape[1:]) if p.ndim == 4 else p for p in patches]
    return ndgrad.stack(parts, axis=0)


def _batch_transforms(transforms) -> Tensor:
    if isinstance(transforms, AffineTransform):
        return transforms.theta
    if isinstance(transforms, Tensor):
        return transforms
    parts = [t.theta.reshape(2, 3) for t in transforms]
    return ndgrad.stack(parts, axis=0)


def _batch_presences(presences) -> Tensor:
    if isinstance(presences, Tensor):
        return presences.reshape(presences.size)
    parts = [
        p.reshape(()) if isinstance(p, Tensor) else Tensor(float(p)) for p in presences
    ]
    return ndgrad.stack(parts, axis=0)


def stitch_add(
    patches: Union[Tensor, Sequence[Tensor]],
    transforms: Union[AffineTransform, Sequence[AffineTransform]],
    presences: Union[Tensor, Sequence],
    canvas_size: Tuple[int, int],
) -> Tensor:
    """
    Sum of the patches warped onto a canvas, each weighted by its presence.

    Each patch is sampled only over an integer-aligned window around its box.
    Accumulation happens in patch order, so the result is reproducible. The
    canvas is not clamped.

    :arg patches:
        N,1,s,s tensor or list of 1,1,s,s tensors.
    :arg transforms:
        Stitch transforms (see `stitch_transform`), batched or as a list.
    :arg presences:
        N presence weights.
    :returns:
        A 1,1,H,W tensor.
    """
    h, w = canvas_size
    if isinstance(patches, (list, tuple)) and not patches:
        return ndgrad.zeros((1, 1, h, w))
    patches = _batch_patches(patches)
    theta = _batch_transforms(transforms)
    pres = _batch_presences(presences)
    n = patches.shape[0]
    if theta.shape[0] != n or pres.shape != (n,):
        raise ShapePriorDataError(
            "stitch_add: %d patches, %d transforms, %d presences"
            % (n, theta.shape[0], pres.size)
        )

    th = theta.data.astype(np.float64)
    if np.any(th[:, 0, 0] <= 0) or np.any(th[:, 1, 1] <= 0):
        raise ShapePriorDataError("stitch transforms must have a positive scale")
    sx = 1.0 / th[:, 0, 0]
    sy = 1.0 / th[:, 1, 1]
    tx = -th[:, 0, 2] * sx
    ty = -th[:, 1, 2] * sy
    half_w = sx * w / 2.0
    half_h = sy * h / 2.0
    cx = (tx + 1.0) * w / 2.0
    cy = (ty + 1.0) * h / 2.0
    # bilinear support reaches half a patch pixel past the box
    ph, pw = patches.shape[2:]
    pad = int(math.ceil(max(half_w.max() / pw, half_h.max() / ph))) + 1
    k = int(math.ceil(2.0 * max(half_w.max(), half_h.max()))) + 2 * pad + 1
    c0 = np.floor(cx - half_w).astype(np.int64) - pad
    r0 = np.floor(cy - half_h).astype(np.int64) - pad
    a = np.arange(k)
    rows = np.broadcast_to(r0[:, None, None] + a[None, :, None], (n, k, k))
    cols = np.broadcast_to(c0[:, None, None] + a[None, None, :], (n, k, k))
    rows, cols = rows.reshape(n, -1), cols.reshape(n, -1)
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    lin = np.where(inside, rows * w + cols, 0)
    xo = 2.0 * (cols + 0.5) / w - 1.0
    yo = 2.0 * (rows + 0.5) / h - 1.0

    sampled, cache = _sample(patches.data, theta.data, xo, yo)
    s = sampled[:, 0, :]
    p = pres.data
    weighted = s * p[:, None] * inside
    canvas = np.bincount(lin.ravel(), weights=weighted.ravel(), minlength=h * w)

    def grad(g):
        gc = g.reshape(-1)[lin] * inside
        gp = (gc * s).sum(axis=1) if pres.requires_grad else None
        gpatch, gtheta = _sample_backward(
            cache,
            (gc * p[:, None])[:, None, :],
            patches.requires_grad,
            theta.requires_grad,
        )
        return gpatch, gtheta, gp

    return ndgrad.make_op(
        canvas.reshape(1, 1, h, w), (patches, theta, pres), grad, "stitch_add"
    )
