# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

"""
Localization network, box parametrization, edge loss and the end-to-end
training loop.
"""

from dataclasses import asdict, dataclass
import json
import logging
import math
import os
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import imgproc, ndgrad, stn
from .errors import ShapePriorDataError, ShapePriorUsageError, check_finite
from .ndgrad import Conv2d, Tensor
from .prior import (
    LatentCode,
    ShapePriorModel,
    assign_parameters,
    freeze_decoder,
    kl_per_sample,
    reinit_encoder,
)
from .shapes import SceneSample
from .stn import BoxParams
from .util import rng_stream


LOG = logging.getLogger(__name__)

LIVE_PRESENCE = 0.01


# ------------------------------------------------------------------------------
@dataclass
class DetectorConfig:
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

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if not self.s_max > self.s_min > 0:
            raise ShapePriorUsageError(
                "need s_max > s_min > 0, got %g, %g" % (self.s_min, self.s_max)
            )
        if self.r_max < 1:
            raise ShapePriorUsageError("r_max must be >= 1: %g" % self.r_max)
        if self.alpha <= 0:
            raise ShapePriorUsageError("alpha must be positive: %g" % self.alpha)
        if self.beta_kl < 0:
            raise ShapePriorUsageError("beta_kl must be >= 0: %g" % self.beta_kl)
        if self.s_cell != LocalizationNet.DOWNSAMPLING:
            raise ShapePriorUsageError(
                "s_cell must equal the network downsampling (%d)"
                % LocalizationNet.DOWNSAMPLING
            )
        if any(v % self.s_cell for v in self.input_size):
            raise ShapePriorUsageError(
                "input size %s is not a multiple of s_cell" % (self.input_size,)
            )
        if self.batch_size < 1 or self.epochs < 0:
            raise ShapePriorUsageError("invalid batch size or epoch count")

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.input_size[0] // self.s_cell, self.input_size[1] // self.s_cell

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


# ------------------------------------------------------------------------------
class LocalizationNet:
    """
    Eight 3x3 convolutions with a 2x2 max pooling after every second one, then a
    1x1 convolution to the five raw features of every cell.
    """

    CHANNELS = (16, 16, 32, 32, 64, 64, 64, 64)
    FEATURES = 5
    DOWNSAMPLING = 16

    def __init__(self, rng: np.random.Generator):
        self.layers: Dict[str, Conv2d] = {}
        cin = 1
        for i, cout in enumerate(self.CHANNELS, start=1):
            self.layers["conv%d" % i] = Conv2d(cin, cout, 3, rng)
            cin = cout
        self.layers["head"] = Conv2d(cin, self.FEATURES, 1, rng, padding=0)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i in range(1, len(self.CHANNELS) + 1):
            h = self.layers["conv%d" % i](h).relu()
            if i % 2 == 0:
                h = ndgrad.maxpool2d(h, 2)
        return self.layers["head"](h)

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers.values() for p in layer.parameters()]

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {}
        for name, layer in self.layers.items():
            named.update(layer.named_parameters("net.%s." % name))
        return named


def build_localization_net(rng: np.random.Generator) -> LocalizationNet:
    return LocalizationNet(rng)


# ------------------------------------------------------------------------------
@dataclass
class DetectionGrid:
    """
    Raw and decoded per-cell predictions, each decoded field a tensor with one
    entry per cell in row-major order.
    """

    raw: Tensor
    presence: Tensor
    scale: Tensor
    log_ratio: Tensor
    x: Tensor
    y: Tensor
    shape: Tuple[int, int]

    @property
    def ratio(self) -> Tensor:
        return self.log_ratio.exp()


def _open_interval(t: Tensor, lo: float, hi: float) -> Tensor:
    dtype = t.data.dtype
    lo = float(np.nextafter(dtype.type(lo), dtype.type(np.inf)))
    hi = float(np.nextafter(dtype.type(hi), dtype.type(-np.inf)))
    return t.clip(lo, hi)


def param_map(f: Tensor, cfg: DetectorConfig) -> DetectionGrid:
    """
    Decode the five raw feature maps (a 5,h,w or 1,5,h,w tensor):

    * presence = sigmoid(f_p)
    * scale = sigmoid(f_s) * (s_max - s_min) + s_min
    * ratio = exp(tanh(f_r) * log(r_max))
    * x, y = 0.5 * tanh(f_x), 0.5 * tanh(f_y)
    """
    if f.ndim == 4:
        if f.shape[0] != 1:
            raise ShapePriorDataError("param_map takes one image at a time")
        f = f.reshape(f.shape[1:])
    if f.ndim != 3 or f.shape[0] != LocalizationNet.FEATURES:
        raise ShapePriorDataError("expected 5 feature maps, got %s" % (f.shape,))
    shape = f.shape[1:]
    flat = f.reshape(LocalizationNet.FEATURES, -1)
    fp, fs, fr, fx, fy = (flat[i] for i in range(LocalizationNet.FEATURES))
    scale = fs.sigmoid() * (cfg.s_max - cfg.s_min) + cfg.s_min
    return DetectionGrid(
        raw=f,
        presence=fp.sigmoid(),
        scale=_open_interval(scale, cfg.s_min, cfg.s_max),
        log_ratio=fr.tanh() * math.log(cfg.r_max),
        x=fx.tanh() * 0.5,
        y=fy.tanh() * 0.5,
        shape=shape,
    )


def cell_centers(grid_shape: Tuple[int, int], s_cell: int):
    """
    Pixel coordinates of the cell centers, and the (row, col) of every cell, in
    row-major order.
    """
    gh, gw = grid_shape
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    x = (cols.ravel() + 0.5) * s_cell
    y = (rows.ravel() + 0.5) * s_cell
    cells = list(zip(rows.ravel().tolist(), cols.ravel().tolist()))
    return x, y, cells


def box_from_params(grid: DetectionGrid, cfg: DetectorConfig) -> BoxParams:
    """
    H_obj = scale * s_cell / sqrt(ratio), W_obj = scale * s_cell * sqrt(ratio),
    offsets = (x, y) * s_cell.
    """
    x_cell, y_cell, cells = cell_centers(grid.shape, cfg.s_cell)
    side = grid.scale * float(cfg.s_cell)
    return BoxParams(
        x_cell,
        y_cell,
        o_x=grid.x * float(cfg.s_cell),
        o_y=grid.y * float(cfg.s_cell),
        h_obj=side * (grid.log_ratio * -0.5).exp(),
        w_obj=side * (grid.log_ratio * 0.5).exp(),
        presence=grid.presence,
        cells=cells,
    )


# ------------------------------------------------------------------------------
def edge_loss(
    g_image: Union[np.ndarray, Tensor], g_rec: Tensor, alpha: float = 0.01
) -> Tensor:
    """
    1 - mean(min(G_image, G_rec)^2) / (mean(G_rec) + alpha)

    :raises ShapePriorDataError:
        If the two maps do not have the same shape.
    """
    g_img = g_image.data if isinstance(g_image, Tensor) else np.asarray(g_image)
    if g_img.shape != g_rec.shape:
        if g_img.squeeze().shape != tuple(d for d in g_rec.shape if d != 1):
            raise ShapePriorDataError(
                "gradient maps differ in shape: %s vs %s" % (g_img.shape, g_rec.shape)
            )
        g_img = g_img.reshape(g_rec.shape)
    both = ndgrad.minimum(g_rec, Tensor(g_img))
    num = both.square().mean()
    den = g_rec.mean() + alpha
    return 1.0 - num / den


def live_kl(
    code: LatentCode,
    presence: Optional[Tensor] = None,
    threshold: float = LIVE_PRESENCE,
) -> Optional[Tensor]:
    """
    Mean KL divergence over the cells whose presence exceeds ``threshold``, or
    None when no cell is live.
    """
    kl = kl_per_sample(code.mu, code.logvar)
    if presence is None:
        return kl.mean()
    live = np.nonzero(presence.data.reshape(-1) > threshold)[0]
    if len(live) == 0:
        return None
    return kl[live].mean()


def total_loss(
    edge: Tensor,
    code: LatentCode,
    beta_kl: float,
    presence: Optional[Tensor] = None,
) -> Tensor:
    """
    Edge loss plus ``beta_kl`` times the KL divergence of the live cells. With no
    live cell the KL term is 0.
    """
    if beta_kl == 0:
        return edge
    return add_kl(edge, live_kl(code, presence), beta_kl)


def add_kl(edge: Tensor, kl: Optional[Tensor], beta_kl: float) -> Tensor:
    if kl is None or beta_kl == 0:
        return edge
    return edge + kl * beta_kl


# ------------------------------------------------------------------------------
@dataclass
class ForwardResult:
    boxes: BoxParams
    patches: Tensor
    code: LatentCode
    decoded: Tensor
    patch_gradients: Tensor
    reconstruction: Tensor
    grid: Optional[DetectionGrid] = None


def reconstruct(
    image: Tensor,
    boxes: BoxParams,
    prior: ShapePriorModel,
    cfg: DetectorConfig,
    rng: Optional[np.random.Generator] = None,
    grid: Optional[DetectionGrid] = None,
) -> ForwardResult:
    """
    Everything after localization: crop every box, encode, decode with the prior,
    take the gradient map of each decoded mask and stitch the maps back weighted
    by presence.
    """
    img_size = image.shape[2:]
    patches = stn.crop_patches(image, boxes, cfg.s_patch)
    code = prior.latent(patches, rng)
    decoded = prior.decode(code.sample)
    pgrad = imgproc.sobel_tensor(decoded)
    canvas = stn.stitch_add(
        pgrad, stn.stitch_transform(boxes, img_size), boxes.presence, img_size
    )
    return ForwardResult(boxes, patches, code, decoded, pgrad, canvas, grid)


def as_image_tensor(image: Union[np.ndarray, Tensor]) -> Tensor:
    if isinstance(image, Tensor):
        t = image
    else:
        t = Tensor(np.asarray(image))
    if t.ndim == 2:
        t = Tensor(t.data.reshape((1, 1) + t.shape))
    if t.ndim != 4 or t.shape[:2] != (1, 1):
        raise ShapePriorDataError("expected a single gray image, got %s" % (t.shape,))
    return t


def detector_forward(
    image: Union[np.ndarray, Tensor],
    detector: "Detector",
    cfg: Optional[DetectorConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> ForwardResult:
    """
    Full forward pass on one preprocessed image. Latent codes are sampled with
    ``rng`` (training) or set to their mean without it (inference).
    """
    cfg = cfg or detector.cfg
    x = as_image_tensor(image)
    if tuple(x.shape[2:]) != cfg.input_size:
        raise ShapePriorDataError(
            "image is %s, the detector expects %s" % (x.shape[2:], cfg.input_size)
        )
    grid = param_map(detector.net(x), cfg)
    boxes = box_from_params(grid, cfg)
    return reconstruct(x, boxes, detector.prior, cfg, rng, grid)


# ------------------------------------------------------------------------------
class Detector:
    """
    Localization network, shape prior and configuration.
    """

    def __init__(
        self,
        cfg: DetectorConfig,
        prior: ShapePriorModel,
        net: Optional[LocalizationNet] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        self.cfg = cfg
        self.prior = prior
        if net is None:
            net = build_localization_net(rng or rng_stream(cfg.seed, "detector-init"))
        self.net = net

    def parameters(self) -> List[Tensor]:
        return self.net.parameters() + self.prior.encoder_parameters()

    def named_parameters(self) -> Dict[str, Tensor]:
        named = self.net.named_parameters()
        named.update(self.prior.named_parameters())
        return named

    def forward(
        self,
        image: Union[np.ndarray, Tensor],
        rng: Optional[np.random.Generator] = None,
    ) -> ForwardResult:
        return detector_forward(image, self, rng=rng)

    def save(self, path: str, meta: Optional[Dict[str, Any]] = None) -> None:
        info = {
            "kind": "detector",
            "detector": self.cfg.to_dict(),
            "latent_dim": self.prior.latent_dim,
            "base_channels": self.prior.base_channels,
            "decoder_checksum": self.prior.decoder_checksum(),
        }
        info.update(meta or {})
        ndgrad.save_weights(path, self.named_parameters(), info)

    @classmethod
    def load(cls, path: str) -> "Detector":
        arrays, meta = ndgrad.load_weights(path)
        if meta.get("kind") != "detector":
            raise ShapePriorDataError("%s: not a detector checkpoint" % path)
        cfg = DetectorConfig(**meta["detector"])
        prior = ShapePriorModel(int(meta["latent_dim"]), int(meta["base_channels"]))
        det = cls(cfg, prior, LocalizationNet(np.random.default_rng(0)))
        assign_parameters(det.named_parameters(), arrays, path)
        freeze_decoder(prior)
        if prior.decoder_checksum() != meta.get("decoder_checksum"):
            raise ShapePriorDataError("%s: decoder checksum mismatch" % path)
        return det


# ------------------------------------------------------------------------------
def _training_images(
    scenes: Sequence[Union[SceneSample, np.ndarray]], cfg: DetectorConfig
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    images = []
    targets = []
    for s in scenes:
        img = s.image if isinstance(s, SceneSample) else np.asarray(s)
        img = imgproc.preprocess(img, cfg.input_size, cfg.equalize)
        images.append(img)
        targets.append(imgproc.target_gradient_map(img, cfg.truncate))
    return images, targets


def train_detector(
    scenes: Sequence[Union[SceneSample, np.ndarray]],
    prior: ShapePriorModel,
    cfg: DetectorConfig,
    rng: Optional[np.random.Generator] = None,
    out_dir: Optional[str] = None,
    reinit: bool = True,
) -> Tuple[Detector, List[Dict[str, float]]]:
    """
    Train the localization network and the prior encoder by minimizing the edge
    loss plus the KL term. The prior decoder must be frozen and stays
    bit-identical.

    :arg rng:
        Seeds the init, data order and latent noise streams. Derived from
        ``cfg.seed`` when omitted.
    :arg out_dir:
        When set, receives ``train_log.jsonl`` and one checkpoint per epoch.
    :arg reinit:
        Reinitialize the prior encoder before training.

    :returns:
        The trained detector and the per-epoch log records.
    :raises ShapePriorDataError:
        If the decoder is not frozen or changes during training.
    :raises ShapePriorNumericError:
        If the loss stops being finite.
    """
    if not prior.frozen_decoder:
        raise ShapePriorDataError("refusing to train with an unfrozen prior decoder")
    if not scenes:
        raise ShapePriorDataError("no training images")
    if rng is None:
        init_rng, data_rng, noise_rng = (
            rng_stream(cfg.seed, n) for n in ("detector-init", "data", "latent-noise")
        )
    else:
        init_rng, data_rng, noise_rng = (
            np.random.default_rng(s) for s in rng.integers(0, 2**63 - 1, size=3)
        )
    if reinit:
        reinit_encoder(prior, init_rng)
    detector = Detector(cfg, prior, build_localization_net(init_rng))
    images, targets = _training_images(scenes, cfg)
    checksum = prior.decoder_checksum()
    opt = ndgrad.Adam(detector.parameters(), lr=cfg.lr)
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.jsonl")
        open(log_path, "w", encoding="utf-8").close()

    history = []
    start = time.monotonic()
    for epoch in range(1, cfg.epochs + 1):
        order = data_rng.permutation(len(images))
        edge_sum = kl_sum = loss_sum = 0.0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0 : b0 + cfg.batch_size]
            opt.zero_grad()
            for i in batch:
                res = detector_forward(images[i], detector, rng=noise_rng)
                edge = edge_loss(targets[i], res.reconstruction, cfg.alpha)
                kl = live_kl(res.code, res.boxes.presence)
                loss = add_kl(edge, kl, cfg.beta_kl)
                check_finite(loss, "detector loss")
                (loss * (1.0 / len(batch))).backward()
                edge_sum += edge.item()
                kl_sum += kl.item() if kl is not None else 0.0
                loss_sum += loss.item()
            opt.step()
        if prior.decoder_checksum() != checksum:
            raise ShapePriorDataError("prior decoder changed during training")
        n = len(images)
        record = {
            "epoch": epoch,
            "edge": edge_sum / n,
            "kl": kl_sum / n,
            "loss": loss_sum / n,
            "wall_time": time.monotonic() - start,
        }
        history.append(record)
        LOG.info(
            "detector epoch %d/%d: loss %.4f (edge %.4f, kl %.4f)",
            epoch,
            cfg.epochs,
            record["loss"],
            record["edge"],
            record["kl"],
        )
        if out_dir is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
            detector.save(os.path.join(out_dir, "checkpoint-epoch%03d.ndgw" % epoch))
    return detector, history
