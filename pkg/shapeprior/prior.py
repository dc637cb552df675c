# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

"""
Variational autoencoder shape model. Once trained, its frozen decoder is the
shape prior of the detector and its encoder is reinitialized and trained along
with the localization network.
"""

from dataclasses import dataclass, field
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ndgrad
from .errors import ShapePriorDataError, ShapePriorUsageError, check_finite
from .ndgrad import Conv2d, Dense, Tensor
from .shapes import S_PATCH
from .util import array_digest


LOG = logging.getLogger(__name__)

BCE_CLAMP = 1e-6


# ------------------------------------------------------------------------------
@dataclass
class LatentCode:
    mu: Tensor
    logvar: Tensor
    sample: Tensor


# ------------------------------------------------------------------------------
class ShapePriorModel:
    """
    Convolutional VAE on S_PATCH x S_PATCH masks.

    The encoder has two 3x3 convolutions per resolution (32, 16, 8) with a max
    pooling after each pair, then dense heads for the mean and the log-variance.
    The decoder mirrors it with nearest neighbour upsampling and ends with a
    sigmoid.
    """

    def __init__(
        self,
        latent_dim: int = 16,
        base_channels: int = 16,
        rng: Optional[np.random.Generator] = None,
    ):
        if latent_dim < 2:
            raise ShapePriorUsageError("latent dimension must be >= 2: %r" % latent_dim)
        if rng is None:
            rng = np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.base_channels = base_channels
        self.frozen_decoder = False
        self.encoder: Dict[str, Any] = {}
        self.decoder: Dict[str, Any] = {}
        self._build_encoder(rng)
        self._build_decoder(rng)

    def _build_encoder(self, rng: np.random.Generator) -> None:
        b = self.base_channels
        chans = [
            (1, b),
            (b, b),
            (b, 2 * b),
            (2 * b, 2 * b),
            (2 * b, 4 * b),
            (4 * b, 4 * b),
        ]
        enc = {}
        for i, (cin, cout) in enumerate(chans, start=1):
            enc["conv%d" % i] = Conv2d(cin, cout, 3, rng)
        flat = 4 * b * (S_PATCH // 8) ** 2
        enc["mu"] = Dense(flat, self.latent_dim, rng)
        enc["logvar"] = Dense(flat, self.latent_dim, rng)
        self.encoder = enc

    def _build_decoder(self, rng: np.random.Generator) -> None:
        b = self.base_channels
        dec = {"dense": Dense(self.latent_dim, 4 * b * (S_PATCH // 8) ** 2, rng)}
        chans = [
            (4 * b, 4 * b),
            (4 * b, 2 * b),
            (2 * b, 2 * b),
            (2 * b, b),
            (b, b),
            (b, 1),
        ]
        for i, (cin, cout) in enumerate(chans, start=1):
            dec["conv%d" % i] = Conv2d(cin, cout, 3, rng)
        self.decoder = dec

    # parameters
    def encoder_parameters(self) -> List[Tensor]:
        return [p for layer in self.encoder.values() for p in layer.parameters()]

    def decoder_parameters(self) -> List[Tensor]:
        return [p for layer in self.decoder.values() for p in layer.parameters()]

    def parameters(self) -> List[Tensor]:
        return self.encoder_parameters() + self.decoder_parameters()

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {}
        for part, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for name, layer in layers.items():
                named.update(layer.named_parameters("%s.%s." % (part, name)))
        return named

    def decoder_checksum(self) -> str:
        # float32 so that the digest does not depend on the precision mode
        params = self.decoder_parameters()
        return array_digest(*(p.data.astype(np.float32) for p in params))

    # forward
    def encode(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """
        :arg x:
            A N,1,32,32 batch of patches.
        :returns:
            (mu, logvar), each N x latent_dim.
        """
        if x.ndim != 4 or x.shape[1:] != (1, S_PATCH, S_PATCH):
            raise ShapePriorDataError(
                "encoder expects N,1,%d,%d input" % (S_PATCH, S_PATCH)
            )
        e = self.encoder
        h = x
        for i in range(1, 7):
            h = e["conv%d" % i](h).relu()
            if i % 2 == 0:
                h = ndgrad.maxpool2d(h, 2)
        h = h.reshape(x.shape[0], -1)
        return e["mu"](h), e["logvar"](h)

    def decode(self, z: Tensor) -> Tensor:
        """
        :arg z:
            A N x latent_dim batch of codes.
        :returns:
            N,1,32,32 masks in (0, 1).
        """
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapePriorDataError(
                "decoder expects N x %d codes, got %s" % (self.latent_dim, z.shape)
            )
        d = self.decoder
        side = S_PATCH // 8
        h = d["dense"](z).relu().reshape(z.shape[0], 4 * self.base_channels, side, side)
        for i in range(1, 7):
            if i % 2 == 1:
                h = ndgrad.upsample2x(h)
            h = d["conv%d" % i](h)
            h = h.sigmoid() if i == 6 else h.relu()
        return h

    @staticmethod
    def reparameterize(
        mu: Tensor, logvar: Tensor, rng: Optional[np.random.Generator]
    ) -> Tensor:
        """
        mu + exp(logvar / 2) * eps with eps from ``rng``; just mu without ``rng``.
        """
        if rng is None:
            return mu
        eps = Tensor(rng.standard_normal(mu.shape))
        return mu + (logvar * 0.5).exp() * eps

    def latent(
        self, x: Tensor, rng: Optional[np.random.Generator] = None
    ) -> LatentCode:
        mu, logvar = self.encode(x)
        return LatentCode(mu, logvar, self.reparameterize(mu, logvar, rng))

    # persistence
    def save(self, path: str, meta: Optional[Dict[str, Any]] = None) -> None:
        info = {
            "kind": "shape-prior",
            "latent_dim": self.latent_dim,
            "base_channels": self.base_channels,
            "frozen_decoder": self.frozen_decoder,
        }
        info.update(meta or {})
        ndgrad.save_weights(path, self.named_parameters(), info)

    @classmethod
    def load(cls, path: str) -> "ShapePriorModel":
        arrays, meta = ndgrad.load_weights(path)
        if meta.get("kind") != "shape-prior":
            raise ShapePriorDataError("%s: not a shape prior" % path)
        model = cls(int(meta["latent_dim"]), int(meta["base_channels"]))
        assign_parameters(model.named_parameters(), arrays, path)
        if meta.get("frozen_decoder"):
            freeze_decoder(model)
        return model


def assign_parameters(
    params: Dict[str, Tensor], arrays: Dict[str, np.ndarray], origin: str
) -> None:
    """
    Copy loaded arrays into model parameters, checking names and shapes.
    """
    for name, p in params.items():
        if name not in arrays:
            raise ShapePriorDataError("%s: missing tensor %r" % (origin, name))
        if arrays[name].shape != p.shape:
            raise ShapePriorDataError(
                "%s: tensor %r has shape %s, expected %s"
                % (origin, name, arrays[name].shape, p.shape)
            )
        p.data = arrays[name].astype(ndgrad.default_dtype())


# ------------------------------------------------------------------------------
def build_vae(
    latent_dim: int = 16,
    base_channels: int = 16,
    rng: Optional[np.random.Generator] = None,
) -> ShapePriorModel:
    return ShapePriorModel(latent_dim, base_channels, rng)


def kl_per_sample(mu: Tensor, logvar: Tensor) -> Tensor:
    """
    KL divergence of each N(mu, exp(logvar)) row to N(0, I), as a N tensor.
    """
    terms = (logvar + 1.0) - mu.square() - logvar.exp()
    return terms.sum(axis=1) * -0.5


def kl_divergence(code: LatentCode) -> Tensor:
    """
    -0.5 * sum(1 + logvar - mu^2 - exp(logvar)) over latent dimensions, averaged
    over the batch.
    """
    return kl_per_sample(code.mu, code.logvar).mean()


def bce_loss(patch: Tensor, reconstruction: Tensor) -> Tensor:
    """
    Pixelwise binary cross-entropy, averaged. Soft targets are allowed.

    Reconstructions are accepted on the closed range [0, 1] and clamped to
    ``[BCE_CLAMP, 1 - BCE_CLAMP]`` before the logarithms, so exact 0 or 1 (hard
    masks) give a finite loss. A perfect 0/1 reconstruction scores
    ``-log(1 - BCE_CLAMP)``.

    :raises ShapePriorDataError:
        If the shapes differ or a value lies outside [0, 1].
    """
    patch = ndgrad.as_tensor(patch)
    if patch.shape != reconstruction.shape:
        raise ShapePriorDataError(
            "reconstruction shape %s does not match %s"
            % (reconstruction.shape, patch.shape)
        )
    r = reconstruction.data
    if np.any(r < 0) or np.any(r > 1):
        raise ShapePriorDataError("reconstruction outside [0, 1]")
    r = reconstruction.clip(BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = patch.detach()
    ll = t * r.log() + (1.0 - t) * (1.0 - r).log()
    return -ll.mean()


def vae_loss(
    patch: Tensor, reconstruction: Tensor, code: LatentCode, beta: float
) -> Tensor:
    return bce_loss(patch, reconstruction) + kl_divergence(code) * beta


# ------------------------------------------------------------------------------
def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class PriorHistory:
    losses: List[float] = field(default_factory=list)
    bce: List[float] = field(default_factory=list)
    kl: List[float] = field(default_factory=list)
    heldout_iou: List[float] = field(default_factory=list)

    @property
    def final_iou(self) -> float:
        return self.heldout_iou[-1] if self.heldout_iou else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "loss": self.losses,
            "bce": self.bce,
            "kl": self.kl,
            "heldout_iou": self.heldout_iou,
        }


def reconstruction_iou(
    model: ShapePriorModel, patches: np.ndarray, threshold: float = 0.5
) -> float:
    """
    Mean IoU between patches and their deterministic reconstructions.
    """
    with ndgrad.no_grad():
        x = Tensor(patches[:, None])
        mu, _ = model.encode(x)
        rec = model.decode(mu).data[:, 0]
    return float(
        np.mean([mask_iou(p > threshold, r > threshold) for p, r in zip(patches, rec)])
    )


def train_prior(
    model: ShapePriorModel,
    patches: Sequence[np.ndarray],
    epochs: int = 30,
    batch_size: int = 32,
    beta: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    lr: float = 1e-3,
    holdout: float = 0.1,
) -> Tuple[ShapePriorModel, PriorHistory]:
    """
    Train the VAE on shape patches.

    A fraction ``holdout`` of the patches (at least one) is kept aside to report
    the reconstruction IoU after every epoch.

    :raises ShapePriorDataError:
        Without patches.
    :raises ShapePriorNumericError:
        If the loss stops being finite.
    """
    if len(patches) == 0:
        raise ShapePriorDataError("no shape patches to train on")
    if len(patches) < 8:
        raise ShapePriorUsageError(
            "need at least 8 shape patches, got %d" % len(patches)
        )
    if rng is None:
        rng = np.random.default_rng(0)
    data = np.stack([np.asarray(p, dtype=np.float64) for p in patches])
    order = rng.permutation(len(data))
    n_hold = max(1, int(round(holdout * len(data))))
    held = data[order[:n_hold]]
    train = data[order[n_hold:]]

    opt = ndgrad.Adam(model.parameters(), lr=lr)
    history = PriorHistory()
    for epoch in range(epochs):
        perm = rng.permutation(len(train))
        tot = bce_sum = kl_sum = 0.0
        for start in range(0, len(train), batch_size):
            batch = Tensor(train[perm[start : start + batch_size]][:, None])
            code = model.latent(batch, rng)
            rec = model.decode(code.sample)
            bce = bce_loss(batch, rec)
            kl = kl_divergence(code)
            loss = bce + kl * beta
            check_finite(loss, "prior loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            k = batch.shape[0]
            tot += loss.item() * k
            bce_sum += bce.item() * k
            kl_sum += kl.item() * k
        history.losses.append(tot / len(train))
        history.bce.append(bce_sum / len(train))
        history.kl.append(kl_sum / len(train))
        history.heldout_iou.append(reconstruction_iou(model, held))
        LOG.info(
            "prior epoch %d/%d: loss %.4f (bce %.4f, kl %.4f), held-out IoU %.3f",
            epoch + 1,
            epochs,
            history.losses[-1],
            history.bce[-1],
            history.kl[-1],
            history.heldout_iou[-1],
        )
    return model, history


# ------------------------------------------------------------------------------
def freeze_decoder(model: ShapePriorModel) -> ShapePriorModel:
    """
    Fix the decoder parameters: they stop receiving gradients and optimizer
    updates.
    """
    for p in model.decoder_parameters():
        p.requires_grad = False
        p.grad = None
    model.frozen_decoder = True
    return model


def reinit_encoder(model: ShapePriorModel, rng: np.random.Generator) -> ShapePriorModel:
    # pylint: disable=protected-access
    model._build_encoder(rng)
    return model


def sample_shapes(
    model: ShapePriorModel, n: int, rng: np.random.Generator
) -> List[np.ndarray]:
    """
    Decode ``n`` codes drawn from the standard normal prior.
    """
    if n < 1:
        raise ShapePriorUsageError("number of samples must be >= 1: %r" % n)
    z = Tensor(rng.standard_normal((n, model.latent_dim)))
    with ndgrad.no_grad():
        out = model.decode(z).data[:, 0]
    return [p.astype(np.float64) for p in out]


def interpolate_codes(
    model: ShapePriorModel, z1: np.ndarray, z2: np.ndarray, t: float = 0.5
) -> np.ndarray:
    """
    Decode the code ``(1 - t) * z1 + t * z2``.
    """
    z = (1.0 - t) * np.asarray(z1) + t * np.asarray(z2)
    with ndgrad.no_grad():
        return model.decode(Tensor(z.reshape(1, -1))).data[0, 0].astype(np.float64)
