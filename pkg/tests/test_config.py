# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

import json
import logging
import os
import tempfile
import unittest

import numpy as np

import shapeprior
from shapeprior import dataio, errors, imgproc, shapes, util
from shapeprior.config import PRESETS, RunConfig, write_run_stamp
from shapeprior.detector import DetectorConfig


shapeprior.configure_logging(stderr_level=logging.ERROR)


# ------------------------------------------------------------------------------
class RunConfigTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def test_defaults(self):
        cfg = RunConfig()
        self.assertEqual(cfg.detector_config(), DetectorConfig())
        self.assertEqual(cfg.iou_thresholds, (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9))
        self.assertEqual(cfg.beta_kl, 5e-3)
        self.assertEqual(cfg.prior_beta, 1.0)

    def test_round_trip(self):
        cfg = RunConfig(input_size=[64, 64], epochs=3, nms_mode="greedy")
        self.assertEqual(cfg.input_size, (64, 64))
        again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        self.assertEqual(again, cfg)
        self.assertEqual(again.digest(), cfg.digest())

    def test_digest_tracks_values(self):
        self.assertNotEqual(RunConfig().digest(), RunConfig(seed=1).digest())

    def test_unknown_key(self):
        with self.assertRaises(shapeprior.ShapePriorUsageError):
            RunConfig.from_dict({"epochs": 2, "learning_rate": 0.1})

    def test_invalid_values(self):
        for data in (
            {"scenario": "video"},
            {"nms_mode": "soft"},
            {"k_min": 5, "k_max": 2},
            {"iou_thresholds": [0.5, 1.0]},
            {"s_min": 2.0, "s_max": 1.0},
            {"input_size": [100, 100]},
            {"epochs": "many"},
        ):
            with self.subTest(data=data):
                with self.assertRaises(shapeprior.ShapePriorUsageError):
                    RunConfig.from_dict(data)
        with self.assertRaises(shapeprior.ShapePriorUsageError):
            RunConfig.from_dict([1, 2])

    def test_load(self):
        with open(self.path("cfg.json"), "w", encoding="utf-8") as f:
            json.dump({"seed": 7, "latent_dim": 8}, f)
        cfg = RunConfig.load(self.path("cfg.json"))
        self.assertEqual((cfg.seed, cfg.latent_dim), (7, 8))

    def test_load_errors(self):
        with self.assertRaises(shapeprior.ShapePriorDataError):
            RunConfig.load(self.path("missing.json"))
        with open(self.path("bad.json"), "w", encoding="utf-8") as f:
            f.write("{seed: 1")
        with self.assertRaises(shapeprior.ShapePriorUsageError):
            RunConfig.load(self.path("bad.json"))

    def test_replace_ignores_none(self):
        cfg = RunConfig().replace(seed=3, epochs=None)
        self.assertEqual(cfg.seed, 3)
        self.assertEqual(cfg.epochs, RunConfig().epochs)

    def test_run_stamp(self):
        out = self.path("run")
        write_run_stamp(out, RunConfig(seed=5))
        with open(os.path.join(out, "config.json"), encoding="utf-8") as f:
            self.assertEqual(json.load(f)["seed"], 5)
        with open(os.path.join(out, "VERSION.json"), encoding="utf-8") as f:
            stamp = json.load(f)
        self.assertIn("shapeprior", stamp)
        self.assertEqual(stamp["numpy"], np.__version__)


# ------------------------------------------------------------------------------
class PresetTest(unittest.TestCase):
    def test_values(self):
        bbbc = RunConfig.from_preset("bbbc")
        self.assertEqual((bbbc.s_min, bbbc.s_max, bbbc.r_max), (2.0, 3.0, 3.0))
        self.assertEqual((bbbc.train_crop, bbbc.test_crop), (256, 128))
        fluo = RunConfig.from_preset("fluo")
        self.assertEqual((fluo.r_max, fluo.r_max_shape), (1.5, 1.5))
        self.assertTrue(fluo.equalize)
        self.assertEqual(fluo.test_crop, 0)
        phc = RunConfig.from_preset("phc")
        self.assertEqual((phc.r_max, phc.r_max_shape), (3.0, 3.0))
        self.assertFalse(phc.equalize)
        for name in PRESETS:
            self.assertEqual(RunConfig.from_preset(name).preset, name)

    def test_file_keys_win(self):
        cfg = RunConfig.from_dict({"r_max": 2.0, "seed": 4}, preset="phc")
        self.assertEqual((cfg.r_max, cfg.r_max_shape, cfg.seed), (2.0, 3.0, 4))
        cfg = RunConfig.from_preset("bbbc", test_crop=64)
        self.assertEqual((cfg.train_crop, cfg.test_crop), (256, 64))

    def test_preset_key(self):
        cfg = RunConfig.from_dict({"preset": "fluo"})
        self.assertTrue(cfg.equalize)
        # the argument takes precedence over the key
        cfg = RunConfig.from_dict({"preset": "fluo"}, preset="bbbc")
        self.assertEqual((cfg.preset, cfg.s_min), ("bbbc", 2.0))
        self.assertEqual(RunConfig.from_dict({}).preset, "")

    def test_round_trip(self):
        cfg = RunConfig.from_preset("phc", epochs=2)
        again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        self.assertEqual(again, cfg)
        self.assertEqual(cfg.to_dict()["preset"], "phc")

    def test_invalid(self):
        with self.assertRaises(shapeprior.ShapePriorUsageError):
            RunConfig.from_preset("dsb")
        with self.assertRaises(shapeprior.ShapePriorUsageError):
            RunConfig.from_dict({"preset": "dsb"})
        with self.assertRaises(shapeprior.ShapePriorUsageError):
            RunConfig(preset="dsb")
        with self.assertRaises(shapeprior.ShapePriorUsageError):
            RunConfig(test_crop=-1)


# ------------------------------------------------------------------------------
class ErrorsTest(unittest.TestCase):
    def test_new(self):
        e = shapeprior.ShapePriorError.new("bad input", errors.EXIT_DATA)
        self.assertIsInstance(e, shapeprior.ShapePriorDataError)
        self.assertEqual(e.rc, 2)
        self.assertEqual(str(e), "bad input: data error")

    def test_hierarchy(self):
        self.assertEqual(str(shapeprior.ShapePriorUsageError("x")), "x: usage error")
        self.assertTrue(issubclass(shapeprior.ShapePriorUsageError, ValueError))
        self.assertTrue(issubclass(shapeprior.ShapePriorNumericError, ArithmeticError))
        self.assertEqual(shapeprior.ShapePriorNumericError.rc, 3)

    def test_check_finite(self):
        self.assertEqual(errors.check_finite(np.float32(2.5)), 2.5)
        for bad in (float("nan"), float("inf"), np.array([-np.inf])):
            with self.assertRaises(shapeprior.ShapePriorNumericError):
                errors.check_finite(bad, "loss")


# ------------------------------------------------------------------------------
class UtilTest(unittest.TestCase):
    def test_rng_streams(self):
        a = util.rng_stream(3, "data").uniform(size=4)
        b = util.rng_stream(3, "data").uniform(size=4)
        c = util.rng_stream(3, "augment").uniform(size=4)
        d = util.rng_stream(4, "data").uniform(size=4)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))
        self.assertFalse(np.array_equal(a, d))

    def test_array_digest(self):
        x = np.arange(4.0)
        self.assertEqual(util.array_digest(x), util.array_digest(x.copy()))
        digest = util.array_digest(x)
        self.assertNotEqual(digest, util.array_digest(x.astype(np.float32)))
        self.assertNotEqual(digest, util.array_digest(x.reshape(2, 2)))

    def test_stderr_level(self):
        try:
            shapeprior.configure_logging(stderr_level=logging.DEBUG)
            self.assertEqual(shapeprior.get_stderr_level(), logging.DEBUG)
            shapeprior.configure_logging()
            self.assertEqual(shapeprior.get_stderr_level(), logging.NOTSET)
        finally:
            shapeprior.configure_logging(stderr_level=logging.ERROR)

    def test_log_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.log")
            try:
                shapeprior.configure_logging(
                    stderr_level=logging.ERROR, log_file=path
                )
                logging.getLogger("shapeprior.test").info("hello %d", 42)
            finally:
                shapeprior.configure_logging(stderr_level=logging.ERROR)
            with open(path, encoding="utf-8") as f:
                self.assertIn("hello 42", f.read())


# ------------------------------------------------------------------------------
class DataIoTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def test_scene_round_trip(self):
        scene = shapes.gen_toy_scene(3, rng=np.random.default_rng(0), size=(64, 64))
        dataio.write_scene(self.dir, "scene_0000", scene, {"seed": 0})
        path = os.path.join(self.dir, "scene_0000_img.png")
        self.assertEqual(dataio.list_images([self.dir]), [path])
        self.assertEqual(dataio.image_stem(path), "scene_0000")
        back = dataio.read_scene(path)
        np.testing.assert_array_equal(back.labels, scene.labels)
        np.testing.assert_allclose(back.image, scene.image, atol=1 / 255)
        self.assertEqual(len(back.meta), scene.n_instances)
        self.assertEqual(list(dataio.read_label_dir(self.dir)), ["scene_0000"])

    def test_plain_images(self):
        img = os.path.join(self.dir, "cells.png")
        imgproc.save_gray(img, np.full((8, 8), 0.5))
        imgproc.save_labels(
            os.path.join(self.dir, "cells_label.png"), np.zeros((8, 8), dtype=int)
        )
        self.assertEqual(dataio.list_images([self.dir]), [img])
        scene = dataio.read_scene(img)
        self.assertFalse(scene.labels.any())

    def test_missing_inputs(self):
        with self.assertRaises(shapeprior.ShapePriorDataError):
            dataio.list_images([os.path.join(self.dir, "nothing")])
        with self.assertRaises(shapeprior.ShapePriorDataError):
            dataio.list_images([self.dir])
        with self.assertRaises(shapeprior.ShapePriorDataError):
            dataio.read_label_dir(self.dir)
        with self.assertRaises(shapeprior.ShapePriorDataError):
            dataio.read_patches(self.dir)
        self.assertEqual(dataio.read_scores(self.dir, "x"), {})

    def test_patches(self):
        patches = shapes.gen_shape_dataset(5, 1.5, rng=np.random.default_rng(0))
        names = dataio.write_patches(self.dir, patches, {"seed": 0})
        self.assertEqual(len(names), 5)
        back = dataio.read_patches(self.dir)
        self.assertEqual(len(back), 5)
        for p, q in zip(patches, back):
            np.testing.assert_allclose(p, q, atol=1 / 255)

    def test_crop_tiles(self):
        image = np.arange(70 * 66).reshape(70, 66)
        tiles = dataio.crop_tiles(image, 32)
        self.assertEqual([s for s, _ in tiles], ["_r0c0", "_r0c1", "_r1c0", "_r1c1"])
        for _, tile in tiles:
            self.assertEqual(tile.shape, (32, 32))
        np.testing.assert_array_equal(tiles[2][1], image[32:64, 0:32])
        for size in (0, 80):
            (only,) = dataio.crop_tiles(image, size)
            self.assertEqual(only[0], "")
            self.assertIs(only[1], image)
