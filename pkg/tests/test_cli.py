# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

import contextlib
import io
import json
import logging
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

import shapeprior
from shapeprior import cli, dataio, imgproc
from shapeprior.prior import ShapePriorModel


shapeprior.configure_logging(stderr_level=logging.ERROR)


TINY = {
    "input_size": [32, 32],
    "latent_dim": 2,
    "base_channels": 2,
    "prior_epochs": 1,
    "prior_batch_size": 8,
    "epochs": 1,
    "batch_size": 2,
}


# ------------------------------------------------------------------------------
class CliTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.stdout = io.StringIO()
        self.stderr = io.StringIO()

    def tearDown(self):
        self.tmp.cleanup()
        shapeprior.configure_logging(stderr_level=logging.ERROR)

    def path(self, *names):
        return os.path.join(self.tmp.name, *names)

    def run_cli(self, *argv):
        with contextlib.redirect_stdout(self.stdout):
            with contextlib.redirect_stderr(self.stderr):
                return cli.main([argv[0], "-q"] + list(argv[1:]))

    def write_config(self, name, data):
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f)
        return path

    def read_bytes(self, *names):
        with open(self.path(*names), "rb") as f:
            return f.read()

    # gen-shapes
    def test_gen_shapes(self):
        for out in ("a", "b"):
            rc = self.run_cli(
                "gen-shapes", "--n", "5", "--seed", "3", "--out", self.path(out)
            )
            self.assertEqual(rc, 0)
        files = ["patch_%05d.png" % i for i in range(5)] + ["manifest.json"]
        for name in files:
            self.assertEqual(self.read_bytes("a", name), self.read_bytes("b", name))
        self.assertEqual(len(dataio.read_patches(self.path("a"))), 5)
        for stamp in ("config.json", "VERSION.json"):
            self.assertTrue(os.path.isfile(self.path("a", stamp)))

    def test_gen_shapes_seed_matters(self):
        for sub, seed in (("a", "1"), ("b", "2")):
            out = self.path(sub)
            self.run_cli("gen-shapes", "--n", "2", "--seed", seed, "--out", out)
        name = "patch_00000.png"
        self.assertNotEqual(self.read_bytes("a", name), self.read_bytes("b", name))

    def test_usage_errors(self):
        rc = self.run_cli("gen-shapes", "--n", "0", "--out", self.path())
        self.assertEqual(rc, 1)
        self.assertEqual(self.run_cli("gen-shapes", "--n", "2"), 1)
        self.assertEqual(self.run_cli("no-such-command"), 1)
        self.assertEqual(self.run_cli("gradcheck", "--op", "fft"), 1)
        self.assertIn("error", self.stderr.getvalue())

    def test_config_errors(self):
        out = self.path("out")
        missing = self.path("missing.json")
        rc = self.run_cli("gen-shapes", "--n", "2", "--config", missing, "--out", out)
        self.assertEqual(rc, 2)
        bad = self.write_config("bad.json", {"learning_rate": 1.0})
        rc = self.run_cli("gen-shapes", "--n", "2", "--config", bad, "--out", out)
        self.assertEqual(rc, 1)

    def test_os_errors_are_data_errors(self):
        blocker = self.path("not-a-dir")
        with open(blocker, "w", encoding="utf-8") as f:
            f.write("x")
        rc = self.run_cli("gen-shapes", "--n", "2", "--out", blocker)
        self.assertEqual(rc, shapeprior.ShapePriorDataError.rc)
        self.assertIn("data error", self.stderr.getvalue())

    def test_preset(self):
        out = self.path("shapes")
        rc = self.run_cli("gen-shapes", "--n", "2", "--preset", "phc", "--out", out)
        self.assertEqual(rc, 0)
        with open(os.path.join(out, "config.json"), encoding="utf-8") as f:
            resolved = json.load(f)
        self.assertEqual(resolved["preset"], "phc")
        self.assertEqual(resolved["r_max_shape"], 3.0)
        self.assertEqual(resolved["test_crop"], 128)
        rc = self.run_cli("gen-shapes", "--n", "2", "--preset", "dsb", "--out", out)
        self.assertEqual(rc, 1)

    # extract-shapes
    def test_extract_shapes(self):
        labels = np.zeros((64, 64), dtype=np.int64)
        labels[10:22, 8:18] = 1
        labels[35:50, 30:44] = 2
        labels[0:6, 50:60] = 3
        imgproc.save_labels(self.path("cells_label.png"), labels)
        out = self.path("patches")
        rc = self.run_cli(
            "extract-shapes", "--labels", self.path("cells_label.png"), "--out", out
        )
        self.assertEqual(rc, 0)
        with open(os.path.join(out, "manifest.json"), encoding="utf-8") as f:
            manifest = json.load(f)
        self.assertEqual(manifest["count"], 2 * 12 * 2)
        self.assertEqual(manifest["params"]["instances"], 2)

    def test_extract_shapes_without_instances(self):
        imgproc.save_labels(self.path("empty_label.png"), np.zeros((16, 16), int))
        rc = self.run_cli(
            "extract-shapes",
            "--labels",
            self.path("empty_label.png"),
            "--out",
            self.path("patches"),
        )
        self.assertEqual(rc, 2)

    # gen-benchmark and evaluate
    def gen_benchmark(self, out="bench"):
        cfg = self.write_config("bench.json", {"input_size": [64, 64]})
        return self.run_cli(
            "gen-benchmark",
            "--k-range",
            "1,2",
            "--n-scenes",
            "2",
            "--seed",
            "4",
            "--config",
            cfg,
            "--out",
            self.path(out),
        )

    def test_gen_benchmark(self):
        self.assertEqual(self.gen_benchmark(), 0)
        with open(self.path("bench", "manifest.json"), encoding="utf-8") as f:
            manifest = json.load(f)
        self.assertEqual(manifest["scenes"], ["scene_0000", "scene_0001"])
        self.assertEqual(manifest["size"], [64, 64])
        for stem in manifest["scenes"]:
            scene = dataio.read_scene(self.path("bench", stem + dataio.IMAGE_SUFFIX))
            self.assertEqual(scene.image.shape, (64, 64))
            self.assertEqual(scene.labels.max(), len(scene.meta))
        self.assertEqual(self.gen_benchmark("again"), 0)
        name = "scene_0001" + dataio.LABEL_SUFFIX
        self.assertEqual(self.read_bytes("bench", name), self.read_bytes("again", name))

    def test_gen_benchmark_bad_range(self):
        rc = self.run_cli(
            "gen-benchmark", "--k-range", "x", "--n-scenes", "1", "--out", self.path()
        )
        self.assertEqual(rc, 1)

    def results(self, out):
        return pd.read_csv(os.path.join(out, "results.csv"), index_col="dataset")

    def test_evaluate(self):
        self.gen_benchmark()
        bench = self.path("bench")
        out = self.path("eval")
        rc = self.run_cli(
            "evaluate", "--pred-dir", bench, "--gt-dir", bench, "--out", out
        )
        self.assertEqual(rc, 0)
        df = self.results(out)
        self.assertEqual(df.loc["bench", "mAP"], 1.0)
        self.assertEqual(len(df.columns), 8)
        self.assertIn("mAP", self.stdout.getvalue())

        nothing = self.path("nothing")
        os.makedirs(nothing)
        out = self.path("eval-empty")
        rc = self.run_cli(
            "evaluate", "--pred-dir", nothing, "--gt-dir", bench, "--out", out
        )
        self.assertEqual(rc, 0)
        self.assertEqual(self.results(out).loc["bench", "mAP"], 0.0)

    def test_evaluate_tiles(self):
        labels = np.zeros((64, 64), dtype=np.int64)
        labels[4:12, 4:14] = 1
        labels[40:50, 6:16] = 2
        labels[36:44, 40:52] = 3
        gt = self.path("gt")
        pred = self.path("pred")
        os.makedirs(gt)
        os.makedirs(pred)
        imgproc.save_labels(os.path.join(gt, "cells_label.png"), labels)
        for suffix, tile in dataio.crop_tiles(labels, 32):
            imgproc.save_labels(os.path.join(pred, "cells%s_label.png" % suffix), tile)
        cfg = self.write_config("tiles.json", {"test_crop": 32})
        out = self.path("eval")
        rc = self.run_cli(
            "evaluate",
            "--pred-dir",
            pred,
            "--gt-dir",
            gt,
            "--config",
            cfg,
            "--out",
            out,
        )
        self.assertEqual(rc, 0)
        self.assertEqual(self.results(out).loc["gt", "mAP"], 1.0)
        # untiled ground truth finds no prediction named after the whole image
        out = self.path("eval-whole")
        rc = self.run_cli("evaluate", "--pred-dir", pred, "--gt-dir", gt, "--out", out)
        self.assertEqual(rc, 0)
        self.assertEqual(self.results(out).loc["gt", "mAP"], 0.0)

    def test_evaluate_without_labels(self):
        os.makedirs(self.path("nothing"))
        rc = self.run_cli(
            "evaluate",
            "--pred-dir",
            self.path("nothing"),
            "--gt-dir",
            self.path("nothing"),
            "--out",
            self.path("eval"),
        )
        self.assertEqual(rc, 2)

    # gradcheck
    def test_gradcheck(self):
        self.assertEqual(self.run_cli("gradcheck", "--op", "conv2d"), 0)
        self.assertIn("conv2d", self.stdout.getvalue())
        self.assertIn("ok", self.stdout.getvalue())

    # training and inference
    def test_pipeline(self):
        cfg = self.write_config("tiny.json", TINY)
        shape_dir = self.path("shapes")
        rc = self.run_cli("gen-shapes", "--n", "16", "--seed", "0", "--out", shape_dir)
        self.assertEqual(rc, 0)
        prior_dir = self.path("prior")
        rc = self.run_cli(
            "train-prior", "--shapes", shape_dir, "--config", cfg, "--out", prior_dir
        )
        self.assertEqual(rc, 0)
        self.assertIn("held-out reconstruction IoU", self.stdout.getvalue())
        with open(os.path.join(prior_dir, "prior_history.json"), encoding="utf-8") as f:
            self.assertEqual(len(json.load(f)["loss"]), 1)

        images = self.path("images")
        os.makedirs(images)
        rng = np.random.default_rng(0)
        for name in ("a.png", "b.png"):
            imgproc.save_gray(os.path.join(images, name), rng.uniform(size=(32, 32)))
        det_dir = self.path("detector")
        rc = self.run_cli(
            "train-detector",
            "--images",
            images,
            "--prior",
            os.path.join(prior_dir, "prior.ndgw"),
            "--config",
            cfg,
            "--out",
            det_dir,
        )
        self.assertEqual(rc, 0)
        for name in ("detector.ndgw", "train_log.jsonl", "checkpoint-epoch001.ndgw"):
            self.assertTrue(os.path.isfile(os.path.join(det_dir, name)))

        pred_dir = self.path("pred")
        rc = self.run_cli(
            "infer",
            "--model",
            os.path.join(det_dir, "detector.ndgw"),
            "--image",
            images,
            "--out",
            pred_dir,
            "--jobs",
            "2",
        )
        self.assertEqual(rc, 0)
        for stem in ("a", "b"):
            for suffix in ("_label.png", "_scores.json", "_overlay.png"):
                self.assertTrue(os.path.isfile(os.path.join(pred_dir, stem + suffix)))
            labels = imgproc.load_labels(os.path.join(pred_dir, stem + "_label.png"))
            self.assertEqual(labels.shape, (32, 32))

        tiled = self.write_config("tiled.json", dict(TINY, test_crop=16))
        tile_dir = self.path("pred-tiles")
        rc = self.run_cli(
            "infer",
            "--model",
            os.path.join(det_dir, "detector.ndgw"),
            "--image",
            os.path.join(images, "a.png"),
            "--config",
            tiled,
            "--out",
            tile_dir,
        )
        self.assertEqual(rc, 0)
        for suffix in ("_r0c0", "_r0c1", "_r1c0", "_r1c1"):
            path = os.path.join(tile_dir, "a%s_label.png" % suffix)
            self.assertTrue(os.path.isfile(path))
        self.assertFalse(os.path.exists(os.path.join(tile_dir, "a_label.png")))

    def test_train_detector_needs_a_prior(self):
        images = self.path("images")
        os.makedirs(images)
        imgproc.save_gray(os.path.join(images, "a.png"), np.zeros((32, 32)))
        rc = self.run_cli(
            "train-detector",
            "--images",
            images,
            "--prior",
            self.path("missing.ndgw"),
            "--out",
            self.path("det"),
        )
        self.assertEqual(rc, 2)

    def test_infer_rejects_a_prior_file(self):
        ShapePriorModel(2, 2).save(self.path("prior.ndgw"))
        imgproc.save_gray(self.path("a.png"), np.zeros((32, 32)))
        rc = self.run_cli(
            "infer",
            "--model",
            self.path("prior.ndgw"),
            "--image",
            self.path("a.png"),
            "--out",
            self.path("pred"),
        )
        self.assertEqual(rc, 2)
