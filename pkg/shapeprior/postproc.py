# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

"""
Inference post-processing: presence filtering, instance masks and mask
non-maximum suppression.
"""

from dataclasses import dataclass, field
import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from . import imgproc, ndgrad, stn
from .errors import ShapePriorUsageError
from .ndgrad import Tensor
from .util import write_json


LOG = logging.getLogger(__name__)

NMS_MODES = ("literal", "greedy")


# ------------------------------------------------------------------------------
@dataclass
class InstanceMask:
    mask: np.ndarray
    score: float
    cell_index: int = 0
    cell: Tuple[int, int] = (0, 0)
    box: List[float] = field(default_factory=list)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def rank(self) -> Tuple[float, int]:
        """
        Sort key: higher score first, lower cell index on ties.
        """
        return (-self.score, self.cell_index)


# ------------------------------------------------------------------------------
def extract_instances(
    result,
    presence_threshold: float = 0.1,
    mask_threshold: float = 0.5,
) -> List[InstanceMask]:
    """
    Instance masks of the cells whose presence is at least
    ``presence_threshold``: each decoded patch is warped onto the image and
    thresholded at ``mask_threshold``. Empty masks are dropped.

    :arg result:
        A `detector.ForwardResult`.
    """
    boxes = result.boxes
    presence = boxes.presence.data.reshape(-1)
    img_size = result.reconstruction.shape[2:]
    decoded = result.decoded.data
    pixel_boxes = boxes.pixel_boxes()
    out = []
    with ndgrad.no_grad():
        for i in np.nonzero(presence >= presence_threshold)[0]:
            box = boxes.select(i)
            canvas = stn.stitch_add(
                Tensor(decoded[i : i + 1]),
                stn.stitch_transform(box, img_size),
                [1.0],
                img_size,
            )
            mask = canvas.data[0, 0] > mask_threshold
            if not mask.any():
                continue
            out.append(
                InstanceMask(
                    mask=mask,
                    score=float(presence[i]),
                    cell_index=int(i),
                    cell=tuple(boxes.cells[i]),
                    box=[float(v) for v in pixel_boxes[i]],
                )
            )
    LOG.debug("%d instances above presence %g", len(out), presence_threshold)
    return out


# ------------------------------------------------------------------------------
def overlap_ratios(masks: Sequence[InstanceMask]) -> np.ndarray:
    """
    Matrix of |m & n| / |m|, row m, column n.
    """
    flat = np.stack([m.mask.reshape(-1) for m in masks]).astype(np.float64)
    inter = flat @ flat.T
    area = np.diag(inter).copy()
    area[area == 0] = 1.0
    return inter / area[:, None]


def nms_masks(
    masks: Sequence[InstanceMask], p_non_max: float = 0.1, mode: str = "literal"
) -> List[InstanceMask]:
    """
    Mask non-maximum suppression. A mask m is compared with every mask n covering
    more than ``p_non_max`` of m's own area.

    In ``literal`` mode m is kept only if it ranks before all of these n, every
    comparison being made against the original set. In ``greedy`` mode masks are
    visited by rank and m is dropped only if such an n was already kept.

    :returns:
        The kept masks, by rank.
    """
    if mode not in NMS_MODES:
        raise ShapePriorUsageError("unknown NMS mode %r" % mode)
    if not masks:
        return []
    order = sorted(range(len(masks)), key=lambda i: masks[i].rank())
    ratio = overlap_ratios(masks)
    np.fill_diagonal(ratio, 0.0)
    position = np.empty(len(masks), dtype=np.int64)
    position[order] = np.arange(len(masks))
    kept = []
    if mode == "literal":
        for m in order:
            rivals = np.nonzero(ratio[m] > p_non_max)[0]
            if all(masks[n].rank() > masks[m].rank() for n in rivals):
                kept.append(m)
    else:
        for m in order:
            if not any(ratio[m, k] > p_non_max for k in kept):
                kept.append(m)
    return [masks[i] for i in kept]


# ------------------------------------------------------------------------------
def masks_to_label_map(
    masks: Sequence[InstanceMask], shape: Tuple[int, int]
) -> Tuple[np.ndarray, List[Dict[str, Any]]]:
    """
    Label map with ids in descending score order; where masks overlap the higher
    score wins.
    """
    ranked = sorted(masks, key=lambda m: m.rank())
    labels = np.zeros(shape, dtype=np.int64)
    for idx in range(len(ranked), 0, -1):
        labels[ranked[idx - 1].mask] = idx
    info = [
        {
            "id": idx,
            "score": m.score,
            "cell": list(m.cell),
            "box": m.box,
            "area": int((labels == idx).sum()),
        }
        for idx, m in enumerate(ranked, start=1)
    ]
    return labels, info


def _palette(n: int) -> np.ndarray:
    h6 = ((np.arange(1, n + 1) * 0.618033988749895) % 1.0) * 6.0
    rgb = np.stack(
        [np.abs(h6 - 3.0) - 1.0, 2.0 - np.abs(h6 - 2.0), 2.0 - np.abs(h6 - 4.0)],
        axis=1,
    )
    return (np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)


def overlay(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """
    RGB rendering of the image with instance boundaries colored by id.
    """
    gray = (np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    n = int(labels.max(initial=0))
    if n == 0:
        return rgb
    edge = (labels > 0) & (
        ndimage.minimum_filter(labels, 3) != ndimage.maximum_filter(labels, 3)
    )
    colors = _palette(n)
    rgb[edge] = colors[labels[edge] - 1]
    return rgb


def write_predictions(
    out_dir: str,
    stem: str,
    masks: Sequence[InstanceMask],
    image: np.ndarray,
    meta: Optional[Dict[str, Any]] = None,
) -> np.ndarray:
    """
    Write ``<stem>_label.png`` (16-bit ids), ``<stem>_scores.json`` and
    ``<stem>_overlay.png`` into ``out_dir``.

    :returns:
        The label map.
    """
    labels, info = masks_to_label_map(masks, image.shape)
    imgproc.save_labels(os.path.join(out_dir, "%s_label.png" % stem), labels)
    doc = {"instances": info}
    doc.update(meta or {})
    write_json(os.path.join(out_dir, "%s_scores.json" % stem), doc)
    Image.fromarray(overlay(image, labels)).save(
        os.path.join(out_dir, "%s_overlay.png" % stem)
    )
    return labels


# ------------------------------------------------------------------------------
def predict(
    detector,
    image: np.ndarray,
    presence_threshold: float = 0.1,
    mask_threshold: float = 0.5,
    p_non_max: float = 0.1,
    nms_mode: str = "literal",
) -> Tuple[np.ndarray, List[InstanceMask]]:
    """
    Preprocess an image, run the detector without latent noise and post-process
    its output.

    :returns:
        The preprocessed image and the kept instance masks.
    """
    cfg = detector.cfg
    img = imgproc.preprocess(image, cfg.input_size, cfg.equalize)
    with ndgrad.no_grad():
        result = detector.forward(img)
    masks = extract_instances(result, presence_threshold, mask_threshold)
    kept = nms_masks(masks, p_non_max, nms_mode)
    LOG.info("%d candidate instances, %d after suppression", len(masks), len(kept))
    return img, kept
