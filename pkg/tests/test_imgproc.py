# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

import logging
import os
import tempfile
import unittest

import numpy as np
from PIL import Image

import shapeprior
from shapeprior import imgproc
from shapeprior.ndgrad import Tensor


shapeprior.configure_logging(stderr_level=logging.ERROR)


def step_image(size=8, col=4):
    img = np.zeros((size, size))
    img[:, col:] = 1.0
    return img


# ------------------------------------------------------------------------------
class GradientMapTest(unittest.TestCase):
    def test_constant_image(self):
        g = imgproc.sobel_gradient_map(np.full((10, 12), 0.4))
        self.assertEqual(g.shape, (10, 12))
        self.assertFalse(g.any())

    def test_step_edge(self):
        g = imgproc.sobel_gradient_map(step_image())
        self.assertEqual(g.max(), 1.0)
        self.assertTrue(np.all(g[:, 3:5] == 1.0))
        self.assertFalse(g[:, :3].any())
        self.assertFalse(g[:, 5:].any())

    def test_translation(self):
        img = np.zeros((32, 32))
        img[8:20, 10:22] = np.random.default_rng(0).uniform(size=(12, 12))
        shifted = np.roll(img, (2, 3), axis=(0, 1))
        g = imgproc.sobel_gradient_map(img)
        gs = imgproc.sobel_gradient_map(shifted)
        expected = np.roll(g, (2, 3), axis=(0, 1))
        np.testing.assert_allclose(gs[3:-3, 3:-3], expected[3:-3, 3:-3], atol=1e-12)

    def test_too_small(self):
        with self.assertRaises(shapeprior.ShapePriorDataError):
            imgproc.sobel_gradient_map(np.zeros((2, 5)))

    def test_target_map(self):
        rng = np.random.default_rng(0)
        g = imgproc.target_gradient_map(rng.uniform(size=(16, 16)), 0.8)
        self.assertEqual(g.max(), 1.0)
        self.assertGreaterEqual(g.min(), 0.0)

    def test_differentiable_map(self):
        x = Tensor(step_image()[None, None])
        g = imgproc.sobel_tensor(x).data[0, 0]
        np.testing.assert_allclose(g[:, 3:5], 1.0, atol=1e-6)
        self.assertLess(g[:, 0].max(), 1e-3)
        self.assertLessEqual(g.max(), 1.0)

    def test_differentiable_map_shape(self):
        with self.assertRaises(shapeprior.ShapePriorDataError):
            imgproc.sobel_tensor(Tensor(np.zeros((1, 2, 8, 8))))


# ------------------------------------------------------------------------------
class NormalizationTest(unittest.TestCase):
    def test_truncate_example(self):
        out = imgproc.truncate_normalize(np.array([0.0, 0.5, 1.0]), 0.8)
        np.testing.assert_allclose(out, [0.0, 0.625, 1.0])

    def test_truncate_saturates(self):
        rng = np.random.default_rng(1)
        g = rng.uniform(0.0, 3.0, (20, 20))
        out = imgproc.truncate_normalize(g, 0.7)
        self.assertEqual(out.max(), 1.0)
        np.testing.assert_array_equal(out[g >= 0.7 * g.max()], 1.0)
        below = g < 0.7 * g.max()
        np.testing.assert_allclose(out[below], g[below] / (0.7 * g.max()))

    def test_truncate_idempotent_without_clipping(self):
        g = np.random.default_rng(2).uniform(size=(8, 8))
        once = imgproc.truncate_normalize(g, 1.0)
        np.testing.assert_allclose(imgproc.truncate_normalize(once, 1.0), once)

    def test_truncate_edge_cases(self):
        self.assertFalse(imgproc.truncate_normalize(np.zeros((4, 4))).any())
        for fraction in (0.0, -0.5, 1.5):
            with self.assertRaises(shapeprior.ShapePriorUsageError):
                imgproc.truncate_normalize(np.ones(3), fraction)

    def test_equalize_outlier(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0.1, 0.2, (16, 16))
        img[5, 5] = 10 * img.mean()
        out = imgproc.equalize_clip(img, 1.2)
        self.assertEqual(out[5, 5], 1.0)
        self.assertEqual(out.min(), 0.0)
        self.assertEqual(out.max(), 1.0)

    def test_equalize_plain_rescale(self):
        img = np.linspace(0.5, 0.6, 25).reshape(5, 5)
        out = imgproc.equalize_clip(img, 1.2)
        np.testing.assert_allclose(out, (img - 0.5) / 0.1)

    def test_equalize_edge_cases(self):
        self.assertFalse(imgproc.equalize_clip(np.zeros((3, 3))).any())
        with self.assertRaises(shapeprior.ShapePriorUsageError):
            imgproc.equalize_clip(np.ones((3, 3)), 0.0)


# ------------------------------------------------------------------------------
class ResizeTest(unittest.TestCase):
    def test_same_size_copies(self):
        img = np.arange(12.0).reshape(3, 4)
        out = imgproc.resize(img, (3, 4))
        np.testing.assert_array_equal(out, img)
        self.assertIsNot(out, img)

    def test_nearest_keeps_labels(self):
        labels = np.zeros((10, 10), dtype=np.int64)
        labels[2:5, 2:5] = 3
        labels[6:9, 1:9] = 7
        out = imgproc.resize(labels, (23, 17), order=0)
        self.assertEqual(out.shape, (23, 17))
        self.assertEqual(set(np.unique(out)), {0, 3, 7})

    def test_bilinear_constant(self):
        out = imgproc.resize(np.full((7, 5), 0.25), (16, 16))
        np.testing.assert_allclose(out, 0.25)

    def test_preprocess(self):
        rng = np.random.default_rng(4)
        out = imgproc.preprocess(rng.uniform(size=(40, 30)), (32, 32), equalize=True)
        self.assertEqual(out.shape, (32, 32))
        self.assertGreaterEqual(out.min(), 0.0)
        self.assertLessEqual(out.max(), 1.0)


# ------------------------------------------------------------------------------
class ImageFileTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def test_gray_round_trip(self):
        img = np.random.default_rng(5).uniform(size=(9, 11))
        imgproc.save_gray(self.path("g.png"), img)
        back = imgproc.load_gray(self.path("g.png"))
        np.testing.assert_allclose(back, img, atol=0.5 / 255 + 1e-9)

    def test_sixteen_bit_normalized_by_max(self):
        data = np.array([[0, 1000], [500, 250]], dtype=np.uint16)
        Image.fromarray(data).save(self.path("deep.png"))
        back = imgproc.load_gray(self.path("deep.png"))
        np.testing.assert_allclose(back, [[0.0, 1.0], [0.5, 0.25]])

    def test_rgb_averaged(self):
        data = np.zeros((2, 2, 3), dtype=np.uint8)
        data[..., 0] = 255
        Image.fromarray(data).save(self.path("rgb.png"))
        back = imgproc.load_gray(self.path("rgb.png"))
        np.testing.assert_allclose(back, 1 / 3)

    def test_labels(self):
        labels = np.zeros((6, 6), dtype=np.int64)
        labels[1:3, 1:3] = 300
        labels[4:, 4:] = 2
        imgproc.save_labels(self.path("l.png"), labels)
        np.testing.assert_array_equal(imgproc.load_labels(self.path("l.png")), labels)
        with self.assertRaises(shapeprior.ShapePriorDataError):
            imgproc.save_labels(self.path("big.png"), labels * 1000)

    def test_not_an_image(self):
        with open(self.path("junk.png"), "wb") as f:
            f.write(b"definitely not a png")
        with self.assertRaises(shapeprior.ShapePriorDataError):
            imgproc.load_gray(self.path("junk.png"))
        with self.assertRaises(shapeprior.ShapePriorDataError):
            imgproc.load_labels(self.path("junk.png"))
