# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

"""
Dataset layout on disk.

A scene is stored as ``<stem>_img.png`` (8-bit image), ``<stem>_label.png``
(16-bit, pixel value = instance id) and ``<stem>.json`` (boxes, parameters,
seed). Real annotated datasets use the same layout. Shape patches are 8-bit
PNGs listed in a ``manifest.json``.
"""

import glob
import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import imgproc
from .errors import ShapePriorDataError
from .shapes import SceneSample
from .util import read_json, write_json


LOG = logging.getLogger(__name__)

IMAGE_SUFFIX = "_img.png"
LABEL_SUFFIX = "_label.png"
SCORES_SUFFIX = "_scores.json"
PATCH_MANIFEST = "manifest.json"


# ------------------------------------------------------------------------------
def image_stem(path: str) -> str:
    name = os.path.basename(path)
    for suffix in (IMAGE_SUFFIX, ".png"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return os.path.splitext(name)[0]


def list_images(paths: Sequence[str]) -> List[str]:
    """
    Expand files and directories into a sorted list of input images. In a
    directory, ``*_img.png`` files are used when there are any, otherwise every
    PNG which is not a label or overlay file.
    """
    found = []
    for p in paths:
        if os.path.isdir(p):
            imgs = sorted(glob.glob(os.path.join(p, "*" + IMAGE_SUFFIX)))
            if not imgs:
                imgs = sorted(
                    f
                    for f in glob.glob(os.path.join(p, "*.png"))
                    if not f.endswith((LABEL_SUFFIX, "_overlay.png"))
                )
            found.extend(imgs)
        elif os.path.isfile(p):
            found.append(p)
        else:
            raise ShapePriorDataError("no such file or directory: %s" % p)
    if not found:
        raise ShapePriorDataError("no input images in %s" % ", ".join(paths))
    return found


# ------------------------------------------------------------------------------
def write_scene(
    out_dir: str, stem: str, scene: SceneSample, extra: Optional[Dict[str, Any]] = None
) -> None:
    imgproc.save_gray(os.path.join(out_dir, stem + IMAGE_SUFFIX), scene.image)
    imgproc.save_labels(os.path.join(out_dir, stem + LABEL_SUFFIX), scene.labels)
    doc = {"instances": scene.meta, "params": scene.params}
    doc.update(extra or {})
    write_json(os.path.join(out_dir, stem + ".json"), doc)


def read_scene(image_path: str) -> SceneSample:
    """
    Load a scene from its image path; the label map and the sidecar are
    optional.
    """
    image = imgproc.load_gray(image_path)
    base = None
    if image_path.endswith(IMAGE_SUFFIX):
        base = image_path[: -len(IMAGE_SUFFIX)]
    labels = np.zeros(image.shape, dtype=np.int64)
    meta: List[Dict[str, Any]] = []
    params: Dict[str, Any] = {}
    if base is not None and os.path.exists(base + LABEL_SUFFIX):
        labels = imgproc.load_labels(base + LABEL_SUFFIX)
    if base is not None and os.path.exists(base + ".json"):
        doc = read_json(base + ".json")
        meta = doc.get("instances", [])
        params = doc.get("params", {})
    return SceneSample(image=image, labels=labels, meta=meta, params=params)


def crop_tiles(array: np.ndarray, size: int) -> List[Tuple[str, np.ndarray]]:
    """
    Cut an image or label map into non-overlapping ``size`` x ``size`` tiles in
    row-major order; the remainder along each edge is dropped.

    :returns:
        ``(suffix, tile)`` pairs, the suffix being ``_r<row>c<col>``. An array
        smaller than a tile, or ``size <= 0``, yields itself with an empty
        suffix.
    """
    h, w = array.shape[:2]
    if size <= 0 or h < size or w < size:
        return [("", array)]
    tiles = []
    for r in range(h // size):
        for c in range(w // size):
            tile = array[r * size : (r + 1) * size, c * size : (c + 1) * size]
            tiles.append(("_r%dc%d" % (r, c), tile))
    return tiles


def read_label_dir(path: str) -> Dict[str, np.ndarray]:
    """
    Map stem -> label map for every ``<stem>_label.png`` of a directory.
    """
    out = {}
    for f in sorted(glob.glob(os.path.join(path, "*" + LABEL_SUFFIX))):
        out[os.path.basename(f)[: -len(LABEL_SUFFIX)]] = imgproc.load_labels(f)
    if not out:
        raise ShapePriorDataError("no label maps in %s" % path)
    return out


def read_scores(pred_dir: str, stem: str) -> Dict[int, float]:
    path = os.path.join(pred_dir, stem + SCORES_SUFFIX)
    if not os.path.exists(path):
        return {}
    doc = read_json(path)
    return {int(i["id"]): float(i["score"]) for i in doc.get("instances", [])}


# ------------------------------------------------------------------------------
def write_patches(
    out_dir: str, patches: Sequence[np.ndarray], params: Optional[Dict[str, Any]] = None
) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, p in enumerate(patches):
        name = "patch_%05d.png" % i
        imgproc.save_gray(os.path.join(out_dir, name), p)
        names.append(name)
    write_json(
        os.path.join(out_dir, PATCH_MANIFEST),
        {
            "count": len(names),
            "size": list(patches[0].shape) if patches else [],
            "files": names,
            "params": params or {},
        },
    )
    LOG.info("wrote %d shape patches to %s", len(names), out_dir)
    return names


def read_patches(path: str) -> List[np.ndarray]:
    manifest = os.path.join(path, PATCH_MANIFEST)
    if os.path.exists(manifest):
        files = [os.path.join(path, f) for f in read_json(manifest)["files"]]
    else:
        files = sorted(glob.glob(os.path.join(path, "*.png")))
    if not files:
        raise ShapePriorDataError("no shape patches in %s" % path)
    patches = []
    for f in files:
        p = imgproc.load_gray(f)
        if patches and p.shape != patches[0].shape:
            raise ShapePriorDataError("%s: patch size %s differs" % (f, p.shape))
        patches.append(p)
    return patches
