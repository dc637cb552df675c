# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

from .config import RunConfig
from .detector import Detector, DetectorConfig, detector_forward, train_detector
from .errors import (
    ShapePriorDataError,
    ShapePriorError,
    ShapePriorNumericError,
    ShapePriorUsageError,
)
from .metrics import ap_at, evaluate_dataset, map_over_range, match_instances
from .postproc import InstanceMask, nms_masks, predict
from .prior import ShapePriorModel, freeze_decoder, train_prior
from .util import configure_logging, get_stderr_level, rng_stream


__all__ = [
    "RunConfig",
    "Detector",
    "DetectorConfig",
    "detector_forward",
    "train_detector",
    "ShapePriorError",
    "ShapePriorDataError",
    "ShapePriorNumericError",
    "ShapePriorUsageError",
    "ap_at",
    "evaluate_dataset",
    "map_over_range",
    "match_instances",
    "InstanceMask",
    "nms_masks",
    "predict",
    "ShapePriorModel",
    "freeze_decoder",
    "train_prior",
    "configure_logging",
    "get_stderr_level",
    "rng_stream",
]
