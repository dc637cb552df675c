# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

from dataclasses import asdict, dataclass, field, fields, replace
import hashlib
import json
import logging
import os
from typing import Any, Dict, Optional, Tuple

from .detector import DetectorConfig
from .errors import ShapePriorDataError, ShapePriorUsageError
from .postproc import NMS_MODES
from .util import read_json, version_stamp, write_json


LOG = logging.getLogger(__name__)

SCENARIOS = ("synthetic", "annotation")

# Per-dataset settings: scale range, maximal box aspect ratio, maximal axis ratio
# of the synthetic ellipses, image equalization, and the side of the square
# training and test crops (0 keeps whole images).
PRESETS: Dict[str, Dict[str, Any]] = {
    "bbbc": {
        "s_min": 2.0,
        "s_max": 3.0,
        "r_max": 3.0,
        "r_max_shape": 2.0,
        "equalize": False,
        "train_crop": 256,
        "test_crop": 128,
    },
    "fluo": {
        "s_min": 1.0,
        "s_max": 2.0,
        "r_max": 1.5,
        "r_max_shape": 1.5,
        "equalize": True,
        "train_crop": 0,
        "test_crop": 0,
    },
    "phc": {
        "s_min": 1.0,
        "s_max": 2.0,
        "r_max": 3.0,
        "r_max_shape": 3.0,
        "equalize": False,
        "train_crop": 256,
        "test_crop": 128,
    },
}


# ------------------------------------------------------------------------------
@dataclass
class RunConfig:
    """
    Every hyperparameter of a run, as one flat JSON object. Unknown keys are
    rejected.
    """

    # detector
    s_cell: int = 16
    s_patch: int = 32
    s_min: float = 1.0
    s_max: float = 2.0
    r_max: float = 1.5
    alpha: float = 0.01
    beta_kl: float = 5e-3
    input_size: Tuple[int, int] = (256, 256)
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 4
    seed: int = 0
    truncate: float = 0.8
    equalize: bool = False
    # paths and dataset
    dataset_dir: str = ""
    output_dir: str = ""
    scenario: str = "synthetic"
    preset: str = ""
    train_crop: int = 0
    test_crop: int = 0
    # shape generation and augmentation
    r_max_shape: float = 1.5
    elastic_alpha: float = 2.0
    elastic_sigma: float = 4.0
    fill_fraction: float = 0.8
    rotation_step: int = 30
    aug_copies: int = 1
    # toy scenes
    contrast: float = 0.6
    k_min: int = 5
    k_max: int = 15
    # prior
    latent_dim: int = 16
    base_channels: int = 16
    prior_beta: float = 1.0
    prior_epochs: int = 30
    prior_batch_size: int = 32
    prior_lr: float = 1e-3
    # inference and evaluation
    presence_threshold: float = 0.1
    mask_threshold: float = 0.5
    p_non_max: float = 0.1
    nms_mode: str = "literal"
    iou_thresholds: Tuple[float, ...] = field(
        default=(0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    )

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        if self.scenario not in SCENARIOS:
            raise ShapePriorUsageError("unknown scenario %r" % self.scenario)
        if self.preset and self.preset not in PRESETS:
            raise ShapePriorUsageError("unknown preset %r" % self.preset)
        if self.train_crop < 0 or self.test_crop < 0:
            raise ShapePriorUsageError("crop sizes must be >= 0")
        if self.nms_mode not in NMS_MODES:
            raise ShapePriorUsageError("unknown NMS mode %r" % self.nms_mode)
        if self.r_max_shape < 1:
            raise ShapePriorUsageError("r_max_shape must be >= 1")
        if not 1 <= self.k_min <= self.k_max:
            raise ShapePriorUsageError("need 1 <= k_min <= k_max")
        if any(not 0 < t < 1 for t in self.iou_thresholds):
            raise ShapePriorUsageError("IoU thresholds must be in (0, 1)")
        self.detector_config()

    @classmethod
    def from_dict(
        cls, data: Dict[str, Any], preset: Optional[str] = None
    ) -> "RunConfig":
        """
        Build a configuration from a flat mapping.

        :arg preset:
            Name of a dataset preset to start from. Defaults to the ``preset``
            key of ``data``. Explicit keys of ``data`` override preset values.

        :raises ShapePriorUsageError:
            On unknown keys, an unknown preset or invalid values.
        """
        if not isinstance(data, dict):
            raise ShapePriorUsageError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ShapePriorUsageError(
                "unknown configuration keys: %s" % ", ".join(unknown)
            )
        name = preset or data.get("preset") or ""
        if name:
            if name not in PRESETS:
                raise ShapePriorUsageError(
                    "unknown preset %r (choose from %s)"
                    % (name, ", ".join(sorted(PRESETS)))
                )
            merged = dict(PRESETS[name])
            merged.update(data)
            merged["preset"] = name
            data = merged
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            if isinstance(e, ShapePriorUsageError):
                raise
            raise ShapePriorUsageError("invalid configuration: %s" % e) from None

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "RunConfig":
        return cls.from_dict(overrides, preset=name)

    @classmethod
    def load(cls, path: str, preset: Optional[str] = None) -> "RunConfig":
        try:
            data = read_json(path)
        except OSError as e:
            raise ShapePriorDataError(
                "cannot read configuration %s: %s" % (path, e)
            ) from None
        except ValueError as e:
            raise ShapePriorUsageError("%s: invalid JSON: %s" % (path, e)) from None
        return cls.from_dict(data, preset)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["iou_thresholds"] = list(self.iou_thresholds)
        return d

    def dump(self, path: str) -> None:
        write_json(path, self.to_dict())

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes)

    def detector_config(self) -> DetectorConfig:
        names = {f.name for f in fields(DetectorConfig)}
        return DetectorConfig(**{k: v for k, v in asdict(self).items() if k in names})


# ------------------------------------------------------------------------------
def write_run_stamp(out_dir: str, cfg: RunConfig) -> None:
    """
    Write the resolved configuration and the version stamp next to the outputs.
    """
    os.makedirs(out_dir, exist_ok=True)
    cfg.dump(os.path.join(out_dir, "config.json"))
    write_json(os.path.join(out_dir, "VERSION.json"), version_stamp())
