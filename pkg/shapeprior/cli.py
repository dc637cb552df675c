# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

"""
Command line interface. Every subcommand reads an optional JSON configuration
(``--config``), writes the resolved configuration and a version stamp into its
output directory, and exits with the ``rc`` of the error it failed with.
"""

import argparse
from concurrent.futures import ThreadPoolExecutor
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import dataio, gradcheck, imgproc, metrics, postproc, shapes
from .config import PRESETS, RunConfig, write_run_stamp
from .detector import Detector, train_detector
from .errors import (
    EXIT_DATA,
    EXIT_OK,
    ShapePriorDataError,
    ShapePriorError,
    ShapePriorNumericError,
    ShapePriorUsageError,
)
from .prior import ShapePriorModel, build_vae, freeze_decoder, train_prior
from .util import configure_logging, get_version, rng_stream, write_json


LOG = logging.getLogger(__name__)


# ------------------------------------------------------------------------------
class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ShapePriorUsageError(message)


def _stderr_level(args: argparse.Namespace) -> int:
    if args.quiet:
        return logging.CRITICAL
    return max(logging.DEBUG, logging.WARNING - 10 * args.verbose)


def _run_config(args: argparse.Namespace, **overrides) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config, args.preset)
    else:
        cfg = RunConfig.from_dict({}, args.preset)
    return cfg.replace(**overrides)


def _positive(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("not an integer: %r" % value) from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1: %r" % value)
    return n


def _int_range(value: str):
    try:
        lo, hi = (int(v) for v in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            "expected MIN,MAX integers: %r" % value
        ) from None
    return lo, hi


# ------------------------------------------------------------------------------
def cmd_gen_shapes(args: argparse.Namespace) -> None:
    cfg = _run_config(args, seed=args.seed, r_max_shape=args.r_max)
    patches = shapes.gen_shape_dataset(
        args.n,
        cfg.r_max_shape,
        alpha=cfg.elastic_alpha,
        sigma=cfg.elastic_sigma,
        rng=rng_stream(cfg.seed, "data"),
        fill_fraction=cfg.fill_fraction,
    )
    write_run_stamp(args.out, cfg)
    dataio.write_patches(
        args.out,
        patches,
        {
            "source": "synthetic",
            "n": args.n,
            "seed": cfg.seed,
            "r_max_shape": cfg.r_max_shape,
        },
    )


def cmd_extract_shapes(args: argparse.Namespace) -> None:
    cfg = _run_config(args, seed=args.seed, scenario="annotation")
    patches = []
    for path in args.labels:
        found = shapes.extract_annotation_patches(imgproc.load_labels(path))
        LOG.info("%s: %d usable instances", path, len(found))
        patches.extend(found)
    if not patches:
        raise ShapePriorDataError(
            "no instances away from the border in %s" % ", ".join(args.labels)
        )
    augmented = shapes.augment_patches(
        patches,
        step=cfg.rotation_step,
        copies=cfg.aug_copies,
        alpha=cfg.elastic_alpha,
        sigma=cfg.elastic_sigma,
        rng=rng_stream(cfg.seed, "augment"),
    )
    write_run_stamp(args.out, cfg)
    dataio.write_patches(
        args.out,
        augmented,
        {
            "source": "annotation",
            "labels": list(args.labels),
            "instances": len(patches),
            "seed": cfg.seed,
        },
    )


def cmd_train_prior(args: argparse.Namespace) -> None:
    cfg = _run_config(args, seed=args.seed)
    patches = dataio.read_patches(args.shapes)
    model = build_vae(
        cfg.latent_dim, cfg.base_channels, rng_stream(cfg.seed, "prior-init")
    )
    model, history = train_prior(
        model,
        patches,
        epochs=cfg.prior_epochs,
        batch_size=cfg.prior_batch_size,
        beta=cfg.prior_beta,
        rng=rng_stream(cfg.seed, "data"),
        lr=cfg.prior_lr,
    )
    write_run_stamp(args.out, cfg)
    model.save(
        os.path.join(args.out, "prior.ndgw"),
        {"config_digest": cfg.digest(), "patches": len(patches)},
    )
    write_json(os.path.join(args.out, "prior_history.json"), history.to_dict())
    print("held-out reconstruction IoU: %.4f" % history.final_iou)


def cmd_train_detector(args: argparse.Namespace) -> None:
    cfg = _run_config(args, seed=args.seed)
    scenes = [
        tile
        for p in dataio.list_images(args.images)
        for _, tile in dataio.crop_tiles(dataio.read_scene(p).image, cfg.train_crop)
    ]
    prior = freeze_decoder(ShapePriorModel.load(args.prior))
    write_run_stamp(args.out, cfg)
    detector, history = train_detector(
        scenes, prior, cfg.detector_config(), out_dir=args.out
    )
    detector.save(
        os.path.join(args.out, "detector.ndgw"),
        {"config_digest": cfg.digest(), "images": len(scenes)},
    )
    if history:
        print("final loss: %.4f" % history[-1]["loss"])


def cmd_infer(args: argparse.Namespace) -> None:
    cfg = _run_config(args)
    detector = Detector.load(args.model)
    paths = dataio.list_images(args.image)
    write_run_stamp(args.out, cfg)

    def run(path: str) -> int:
        stem = dataio.image_stem(path)
        total = 0
        for suffix, tile in dataio.crop_tiles(imgproc.load_gray(path), cfg.test_crop):
            img, kept = postproc.predict(
                detector,
                tile,
                presence_threshold=cfg.presence_threshold,
                mask_threshold=cfg.mask_threshold,
                p_non_max=cfg.p_non_max,
                nms_mode=cfg.nms_mode,
            )
            postproc.write_predictions(
                args.out, stem + suffix, kept, img, {"source": path, "tile": suffix}
            )
            total += len(kept)
        LOG.info("%s: %d instances", path, total)
        return total

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            counts = list(pool.map(run, paths))
    else:
        counts = [run(p) for p in paths]
    for path, n in zip(paths, counts):
        print("%s: %d instances" % (path, n))


def _prediction(pred_dir: str, stem: str, gt: np.ndarray):
    path = os.path.join(pred_dir, stem + dataio.LABEL_SUFFIX)
    if not os.path.exists(path):
        LOG.warning("no prediction for %s, counted as empty", stem)
        return [], gt
    labels = imgproc.load_labels(path)
    if labels.shape != gt.shape:
        gt = imgproc.resize(gt, labels.shape, order=0)
    preds = metrics.instances_from_label_map(
        labels, dataio.read_scores(pred_dir, stem)
    )
    return preds, gt


def cmd_evaluate(args: argparse.Namespace) -> None:
    cfg = _run_config(args)
    gts = {
        stem + suffix: tile
        for stem, labels in dataio.read_label_dir(args.gt_dir).items()
        for suffix, tile in dataio.crop_tiles(labels, cfg.test_crop)
    }
    pairs = [_prediction(args.pred_dir, stem, gt) for stem, gt in gts.items()]
    row, counts = metrics.evaluate_dataset(pairs, cfg.iou_thresholds, args.jobs)
    write_run_stamp(args.out, cfg)
    name = os.path.basename(os.path.normpath(args.gt_dir)) or "dataset"
    df = metrics.write_results_table(os.path.join(args.out, "results"), {name: row})
    LOG.info("pooled TP/FP/FN per threshold: %s", counts.tolist())
    print(df.to_string(float_format="%.4f"))


def cmd_gradcheck(args: argparse.Namespace) -> None:
    names = sorted(gradcheck.CHECKS) if args.op == "all" else [args.op]
    failed = []
    for name, err in gradcheck.run_checks(names, args.seed):
        ok = bool(err < gradcheck.TOLERANCE)
        print("%-16s %.3e %s" % (name, err, "ok" if ok else "FAILED"))
        if not ok:
            failed.append(name)
    if failed:
        raise ShapePriorNumericError(
            "relative error above %g for: %s"
            % (gradcheck.TOLERANCE, ", ".join(failed))
        )


def cmd_gen_benchmark(args: argparse.Namespace) -> None:
    k_min, k_max = args.k_range
    cfg = _run_config(args, seed=args.seed, k_min=k_min, k_max=k_max)
    scene_args = {
        "s_range": (cfg.s_min, cfg.s_max),
        "r_max_shape": cfg.r_max_shape,
        "contrast": cfg.contrast,
        "size": cfg.input_size,
        "s_cell": cfg.s_cell,
        "alpha": cfg.elastic_alpha,
        "sigma": cfg.elastic_sigma,
    }
    scenes = shapes.gen_benchmark(
        args.n_scenes,
        (cfg.k_min, cfg.k_max),
        rng=rng_stream(cfg.seed, "data"),
        **scene_args,
    )
    write_run_stamp(args.out, cfg)
    stems = []
    for i, scene in enumerate(scenes):
        stem = "scene_%04d" % i
        dataio.write_scene(args.out, stem, scene, {"seed": cfg.seed, "index": i})
        stems.append(stem)
    manifest = dict(scene_args, s_range=list(scene_args["s_range"]))
    manifest.update(
        {
            "size": list(cfg.input_size),
            "k_range": [cfg.k_min, cfg.k_max],
            "n_scenes": args.n_scenes,
            "seed": cfg.seed,
            "scenes": stems,
            "instances": [s.n_instances for s in scenes],
        }
    )
    write_json(os.path.join(args.out, "manifest.json"), manifest)
    LOG.info("wrote %d scenes to %s", len(scenes), args.out)


# ------------------------------------------------------------------------------
def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument(
        "--config", metavar="JSON", help="run configuration (defaults otherwise)"
    )
    common.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        help="dataset preset the configuration starts from",
    )
    common.add_argument(
        "-v", "--verbose", action="count", default=0, help="more log output"
    )
    common.add_argument("-q", "--quiet", action="store_true", help="no log output")

    parser = ArgumentParser(
        prog="shapeprior",
        description="Shape-prior instance segmentation trained from shape patches.",
    )
    parser.add_argument("--version", action="version", version=get_version())
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = command("gen-shapes", cmd_gen_shapes, "generate deformed ellipse patches")
    p.add_argument("--n", type=int, required=True, help="number of patches")
    p.add_argument("--r-max", type=float, help="maximal axis ratio")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = command(
        "extract-shapes", cmd_extract_shapes, "augmented patches from label maps"
    )
    p.add_argument("--labels", nargs="+", required=True, metavar="PNG")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = command("train-prior", cmd_train_prior, "train the VAE shape prior")
    p.add_argument("--shapes", required=True, metavar="DIR")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = command("train-detector", cmd_train_detector, "train the detector")
    p.add_argument("--images", nargs="+", required=True, metavar="PATH")
    p.add_argument("--prior", required=True, metavar="NDGW")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = command("infer", cmd_infer, "segment images with a trained detector")
    p.add_argument("--model", required=True, metavar="NDGW")
    p.add_argument("--image", nargs="+", required=True, metavar="PATH")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=_positive, default=1)

    p = command("evaluate", cmd_evaluate, "AP over IoU thresholds")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=_positive, default=1)

    p = command("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    p.add_argument("--op", default="all", choices=["all"] + sorted(gradcheck.CHECKS))
    p.add_argument("--seed", type=int, default=0)

    p = command("gen-benchmark", cmd_gen_benchmark, "generate toy scenes")
    p.add_argument("--k-range", type=_int_range, default=(5, 15), metavar="MIN,MAX")
    p.add_argument("--n-scenes", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    return parser


# ------------------------------------------------------------------------------
def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one subcommand.

    :returns:
        The process exit code.
    """
    try:
        args = build_parser().parse_args(argv)
        configure_logging(stderr_level=_stderr_level(args))
        args.func(args)
    except OSError as e:
        err = ShapePriorError.new(str(e), EXIT_DATA)
    except ShapePriorError as e:
        err = e
    else:
        return EXIT_OK
    print("shapeprior: error: %s" % err, file=sys.stderr)
    return err.rc
