# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

import itertools
import json
import logging
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

import shapeprior
from shapeprior import metrics
from shapeprior.postproc import InstanceMask


shapeprior.configure_logging(stderr_level=logging.ERROR)


def rect(shape, r0, r1, c0, c1):
    mask = np.zeros(shape, dtype=bool)
    mask[r0:r1, c0:c1] = True
    return mask


def pred(mask, score, index=0):
    return InstanceMask(mask=mask, score=score, cell_index=index)


def two_instances():
    gts = np.zeros((32, 40), dtype=np.int64)
    gts[2:12, 2:12] = 1
    gts[0:10, 20:30] = 2
    return gts


def optimal_tp(ious, t):
    # best matching size by enumeration of all assignments
    n_p, n_g = ious.shape
    n = max(n_p, n_g)
    if n == 0:
        return 0
    ok = np.zeros((n, n), dtype=bool)
    ok[:n_p, :n_g] = ious > t
    perms = np.array(list(itertools.permutations(range(n))))
    return int(ok[np.arange(n), perms].sum(axis=1).max())


def random_case(rng, shape=(16, 16)):
    gts = np.zeros(shape, dtype=np.int64)
    n_gt = int(rng.integers(0, 5))
    for i in range(1, n_gt + 1):
        r0, c0 = rng.integers(0, 12, 2)
        gts[r0 : r0 + rng.integers(2, 6), c0 : c0 + rng.integers(2, 6)] = i
    preds = []
    for j in range(int(rng.integers(0, 6))):
        ids = metrics.gt_ids(gts)
        if len(ids) and rng.uniform() < 0.6:
            mask = np.roll(gts == rng.choice(ids), rng.integers(-1, 2, 2), (0, 1))
        else:
            r0, c0 = rng.integers(0, 12, 2)
            mask = rect(shape, r0, r0 + 4, c0, c0 + 4)
        preds.append(pred(mask, float(rng.uniform()), j))
    return preds, gts


# ------------------------------------------------------------------------------
class IouTest(unittest.TestCase):
    def test_values(self):
        a = rect((8, 8), 0, 4, 0, 4)
        self.assertEqual(metrics.iou(a, a), 1.0)
        self.assertEqual(metrics.iou(a, rect((8, 8), 4, 8, 4, 8)), 0.0)
        self.assertAlmostEqual(metrics.iou(a, rect((8, 8), 0, 4, 2, 6)), 8 / 24)

    def test_errors(self):
        with self.assertRaises(shapeprior.ShapePriorDataError):
            metrics.iou(np.zeros((4, 4), dtype=bool), np.ones((4, 4), dtype=bool))
        with self.assertRaises(shapeprior.ShapePriorDataError):
            metrics.iou(np.ones((4, 4), dtype=bool), np.ones((4, 5), dtype=bool))

    def test_matrix(self):
        gts = two_instances()
        preds = [pred(gts == 2, 0.9), pred(rect(gts.shape, 2, 12, 2, 7), 0.5)]
        m = metrics.iou_matrix(preds, gts)
        np.testing.assert_allclose(m, [[0.0, 1.0], [0.5, 0.0]])


# ------------------------------------------------------------------------------
class MatchTest(unittest.TestCase):
    def test_ap_half(self):
        gts = np.zeros((20, 40), dtype=np.int64)
        gts[0:5, 0:5] = 1
        gts[0:5, 10:15] = 2
        gts[10:15, 10:15] = 3
        preds = [
            pred(gts == 1, 0.9, 0),
            pred(gts == 2, 0.8, 1),
            pred(rect(gts.shape, 10, 15, 30, 35), 0.7, 2),
        ]
        m = metrics.match_instances(preds, gts, 0.5)
        self.assertEqual((m.tp, m.fp, m.fn), (2, 1, 1))
        self.assertEqual(metrics.ap_at(preds, gts, 0.5), 0.5)

    def test_counts(self):
        self.assertEqual(metrics.ap_from_counts(0, 0, 0), 1.0)
        self.assertEqual(metrics.ap_from_counts(0, 0, 3), 0.0)
        self.assertEqual(metrics.ap_from_counts(2, 1, 1), 0.5)

    def test_higher_score_matches_first(self):
        gts = two_instances()
        weak = pred(rect(gts.shape, 2, 12, 3, 12), 0.4, 0)
        strong = pred(gts == 1, 0.9, 1)
        m = metrics.match_instances([weak, strong], gts, 0.5)
        self.assertEqual(m.tp, 1)
        self.assertEqual(m.pairs[0][0], 1)

    def test_threshold_range(self):
        gts = two_instances()
        for t in (0.0, 1.0, 1.5):
            with self.assertRaises(shapeprior.ShapePriorUsageError):
                metrics.match_instances([], gts, t)

    def test_greedy_agrees_with_optimal(self):
        rng = np.random.default_rng(0)
        agree = 0
        trials = 1000
        for _ in range(trials):
            preds, gts = random_case(rng)
            greedy = metrics.match_instances(preds, gts, 0.5).tp
            agree += greedy == optimal_tp(metrics.iou_matrix(preds, gts), 0.5)
        self.assertGreaterEqual(agree / trials, 0.95)

    def test_empty_inputs(self):
        gts = two_instances()
        m = metrics.match_instances([], gts, 0.5)
        self.assertEqual((m.tp, m.fp, m.fn), (0, 0, 2))
        empty = np.zeros_like(gts)
        m = metrics.match_instances([pred(gts == 1, 0.5)], empty, 0.5)
        self.assertEqual((m.tp, m.fp, m.fn), (0, 1, 0))


# ------------------------------------------------------------------------------
class AveragePrecisionTest(unittest.TestCase):
    def test_range(self):
        gts = two_instances()
        partial = rect(gts.shape, 0, 10, 25, 36)
        preds = [pred(gts == 1, 0.9, 0), pred(partial, 0.5, 1)]
        row = metrics.map_over_range(preds, gts)
        self.assertEqual(
            list(row), ["0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9", "mAP"]
        )
        self.assertEqual(row["0.3"], 1.0)
        self.assertAlmostEqual(row["0.4"], 1 / 3)
        self.assertAlmostEqual(row["0.9"], 1 / 3)
        aps = [row[k] for k in list(row)[:-1]]
        self.assertEqual(aps, sorted(aps, reverse=True))
        self.assertAlmostEqual(row["mAP"], (1 + 6 / 3) / 7)

    def test_pooled_over_images(self):
        gts = np.zeros((10, 10), dtype=np.int64)
        gts[2:6, 2:6] = 1
        hit = [pred(gts == 1, 0.9)]
        miss = [pred(rect(gts.shape, 7, 10, 7, 10), 0.9)]
        pairs = [(hit, gts), (miss, gts)]
        row, counts = metrics.evaluate_dataset(pairs, (0.5,))
        self.assertAlmostEqual(row["0.5"], 1 / 3)
        np.testing.assert_array_equal(counts, [[1, 1, 1]])
        threaded, _ = metrics.evaluate_dataset(pairs, (0.5,), jobs=2)
        self.assertEqual(threaded, row)

    def test_label_map_instances(self):
        labels = two_instances()
        inst = metrics.instances_from_label_map(labels)
        self.assertEqual([m.cell_index for m in inst], [1, 2])
        self.assertGreater(inst[0].rank(), (-1.0, 0))
        self.assertLess(inst[0].rank(), inst[1].rank())
        inst = metrics.instances_from_label_map(labels, {2: 0.9, 1: 0.1})
        self.assertLess(inst[1].rank(), inst[0].rank())

    def test_results_table(self):
        rows = {"toy": {"0.3": 1.0, "0.4": 0.5, "mAP": 0.75}}
        with tempfile.TemporaryDirectory() as tmp:
            prefix = os.path.join(tmp, "results")
            metrics.write_results_table(prefix, rows)
            df = pd.read_csv(prefix + ".csv", index_col="dataset")
            with open(prefix + ".json", encoding="utf-8") as f:
                doc = json.load(f)
        self.assertEqual(list(df.columns), ["0.3", "0.4", "mAP"])
        self.assertAlmostEqual(df.loc["toy", "mAP"], 0.75)
        self.assertEqual(doc["toy"]["0.4"], 0.5)
