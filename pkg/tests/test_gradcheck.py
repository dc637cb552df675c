# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

import logging
import unittest

import shapeprior
from shapeprior import gradcheck


shapeprior.configure_logging(stderr_level=logging.ERROR)


# ------------------------------------------------------------------------------
class GradCheckTest(unittest.TestCase):
    def test_registered_checks(self):
        for name in (
            "conv2d",
            "maxpool2d",
            "upsample2x",
            "dense",
            "activations",
            "reductions",
            "pad_edge",
            "sobel_tensor",
            "bilinear_sample",
            "stitch_add",
            "edge_loss",
            "kl_divergence",
            "param_map",
            "vae_loss",
            "detector_forward",
        ):
            self.assertIn(name, gradcheck.CHECKS)

    def test_all_checks_within_tolerance(self):
        for name in sorted(gradcheck.CHECKS):
            with self.subTest(check=name):
                self.assertLess(gradcheck.run_check(name, seed=0), gradcheck.TOLERANCE)

    def test_other_seed(self):
        for name in ("bilinear_sample", "stitch_add", "edge_loss"):
            with self.subTest(check=name):
                self.assertLess(gradcheck.run_check(name, seed=3), gradcheck.TOLERANCE)

    def test_unknown_check(self):
        with self.assertRaises(shapeprior.ShapePriorUsageError):
            gradcheck.run_check("softmax")

    def test_run_checks(self):
        results = gradcheck.run_checks(["dense", "pad_edge"])
        self.assertEqual([n for n, _ in results], ["dense", "pad_edge"])
