# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

"""
Evaluation: IoU, greedy instance matching and average precision
TP / (TP + FP + FN) over a range of IoU thresholds.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import ShapePriorDataError, ShapePriorUsageError
from .postproc import InstanceMask


LOG = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


# ------------------------------------------------------------------------------
def iou(a: np.ndarray, b: np.ndarray) -> float:
    """
    |a & b| / |a | b| of two boolean masks.

    :raises ShapePriorDataError:
        If the masks differ in size or ``a`` is empty.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapePriorDataError("mask shapes differ: %s vs %s" % (a.shape, b.shape))
    if not a.any():
        raise ShapePriorDataError("IoU of an empty mask")
    return float(np.logical_and(a, b).sum() / np.logical_or(a, b).sum())


# ------------------------------------------------------------------------------
@dataclass
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)


def gt_ids(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    return ids[ids > 0]


def iou_matrix(preds: Sequence[InstanceMask], labels: np.ndarray) -> np.ndarray:
    """
    IoU of every prediction (rows) with every ground-truth id (columns, in
    increasing id order).
    """
    ids = gt_ids(labels)
    if not preds or len(ids) == 0:
        return np.zeros((len(preds), len(ids)))
    flat = labels.reshape(-1)
    top = int(flat.max())
    gt_area = np.bincount(flat, minlength=top + 1)[ids]
    out = np.zeros((len(preds), len(ids)))
    for p, m in enumerate(preds):
        if m.mask.shape != labels.shape:
            raise ShapePriorDataError(
                "prediction shape %s differs from labels %s"
                % (m.mask.shape, labels.shape)
            )
        inter = np.bincount(flat[m.mask.reshape(-1)], minlength=top + 1)[ids]
        union = m.area + gt_area - inter
        out[p] = inter / np.maximum(union, 1)
    return out


def match_from_ious(
    preds: Sequence[InstanceMask], ids: np.ndarray, ious: np.ndarray, t: float
) -> MatchResult:
    order = sorted(range(len(preds)), key=lambda i: preds[i].rank())
    free = np.ones(len(ids), dtype=bool)
    res = MatchResult()
    for p in order:
        if not free.any():
            break
        cand = np.where(free, ious[p], -1.0)
        g = int(np.argmax(cand))
        if cand[g] > t:
            free[g] = False
            res.pairs.append((p, int(ids[g]), float(cand[g])))
    res.tp = len(res.pairs)
    res.fp = len(preds) - res.tp
    res.fn = len(ids) - res.tp
    return res


def match_instances(
    preds: Sequence[InstanceMask], gts: np.ndarray, t: float
) -> MatchResult:
    """
    Greedy matching by descending prediction score: each prediction takes the
    free ground-truth instance of highest IoU when that IoU is above ``t``.
    """
    if not 0 < t < 1:
        raise ShapePriorUsageError("IoU threshold must be in (0, 1): %r" % t)
    return match_from_ious(preds, gt_ids(gts), iou_matrix(preds, gts), t)


# ------------------------------------------------------------------------------
def ap_from_counts(tp: int, fp: int, fn: int) -> float:
    total = tp + fp + fn
    if total == 0:
        return 1.0
    return tp / total


def ap_at(preds: Sequence[InstanceMask], gts: np.ndarray, t: float) -> float:
    m = match_instances(preds, gts, t)
    return ap_from_counts(m.tp, m.fp, m.fn)


def _column(t: float) -> str:
    return "%.1f" % t


def _row(counts: np.ndarray, thresholds: Sequence[float]) -> Dict[str, float]:
    aps = [ap_from_counts(*c) for c in counts]
    row = {_column(t): ap for t, ap in zip(thresholds, aps)}
    row["mAP"] = float(np.mean(aps))
    return row


def image_counts(
    preds: Sequence[InstanceMask],
    gts: np.ndarray,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> np.ndarray:
    """
    T x 3 array of (TP, FP, FN) per threshold.
    """
    for t in thresholds:
        if not 0 < t < 1:
            raise ShapePriorUsageError("IoU threshold must be in (0, 1): %r" % t)
    ids = gt_ids(gts)
    ious = iou_matrix(preds, gts)
    out = np.zeros((len(thresholds), 3), dtype=np.int64)
    for k, t in enumerate(thresholds):
        m = match_from_ious(preds, ids, ious, t)
        out[k] = (m.tp, m.fp, m.fn)
    return out


def map_over_range(
    preds: Sequence[InstanceMask],
    gts: np.ndarray,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> Dict[str, float]:
    """
    AP at every threshold and their mean, keyed ``"0.3"`` ... ``"0.9"`` and
    ``"mAP"``.
    """
    return _row(image_counts(preds, gts, thresholds), thresholds)


# ------------------------------------------------------------------------------
def instances_from_label_map(
    labels: np.ndarray, scores: Optional[Dict[int, float]] = None
) -> List[InstanceMask]:
    """
    One instance per id of a predicted label map. Without scores, lower ids rank
    first.
    """
    out = []
    for i in gt_ids(labels):
        score = scores.get(int(i)) if scores else None
        if score is None:
            score = 1.0 / (1.0 + int(i))
        out.append(
            InstanceMask(mask=labels == i, score=float(score), cell_index=int(i))
        )
    return out


def evaluate_dataset(
    pairs: Sequence[Tuple[Sequence[InstanceMask], np.ndarray]],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    jobs: int = 1,
) -> Tuple[Dict[str, float], np.ndarray]:
    """
    Dataset-level AP: TP, FP and FN are pooled over all images before the
    quotient.

    :returns:
        The AP row and the pooled T x 3 counts.
    """
    def count(pair):
        return image_counts(pair[0], pair[1], thresholds)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_image = list(pool.map(count, pairs))
    else:
        per_image = [count(p) for p in pairs]
    counts = np.sum(per_image, axis=0) if per_image else np.zeros((len(thresholds), 3))
    LOG.debug("pooled counts over %d images: %s", len(pairs), counts.tolist())
    return _row(counts, thresholds), counts


def results_table(rows: Dict[str, Dict[str, float]]) -> pd.DataFrame:
    df = pd.DataFrame.from_dict(rows, orient="index")
    df.index.name = "dataset"
    return df


def write_results_table(prefix: str, rows: Dict[str, Dict[str, float]]) -> pd.DataFrame:
    """
    Write ``<prefix>.csv`` and ``<prefix>.json`` with one row per dataset and
    the columns 0.3 ... 0.9, mAP.
    """
    df = results_table(rows)
    df.to_csv(prefix + ".csv", float_format="%.4f")
    df.to_json(prefix + ".json", orient="index", indent=2)
    return df
