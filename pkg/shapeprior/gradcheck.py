# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

"""
Registry of finite-difference checks of the differentiable operations. Each
check runs in 64-bit precision and returns the maximal relative error.
"""

import logging
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import imgproc, ndgrad, stn
from .detector import DetectorConfig, edge_loss, param_map, reconstruct, total_loss
from .errors import ShapePriorUsageError
from .ndgrad import Tensor, grad_check
from .prior import LatentCode, ShapePriorModel, kl_divergence, vae_loss
from .stn import BoxParams


LOG = logging.getLogger(__name__)

TOLERANCE = 1e-4
EPS = 1e-5

CHECKS: Dict[str, Callable[[np.random.Generator], float]] = {}


# ------------------------------------------------------------------------------
def register(name: str):
    def decorator(fn):
        CHECKS[name] = fn
        return fn

    return decorator


def run_check(name: str, seed: int = 0) -> float:
    """
    :raises ShapePriorUsageError:
        If no check has this name.
    """
    try:
        fn = CHECKS[name]
    except KeyError:
        raise ShapePriorUsageError(
            "unknown check %r, expected one of: %s" % (name, ", ".join(sorted(CHECKS)))
        ) from None
    with ndgrad.precision("float64"):
        err = fn(np.random.default_rng(seed))
    LOG.info("gradient check %s: max relative error %.3g", name, err)
    return err


def run_checks(names: List[str], seed: int = 0) -> List[Tuple[str, float]]:
    return [(n, run_check(n, seed)) for n in names]


def _projection(shape, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.standard_normal(shape))

    def project(out: Tensor) -> Tensor:
        return (out * r).sum()

    return project


def _check(f: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    return grad_check(f, x, eps=EPS)


# ------------------------------------------------------------------------------
@register("conv2d")
def _conv2d(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    proj = _projection((2, 3, 5, 5), rng)
    strided = _projection((2, 3, 3, 3), rng)
    kt, bt = Tensor(k), Tensor(b)
    return max(
        _check(lambda t: proj(ndgrad.conv2d(t, kt, bt, 1, 1)), x),
        _check(lambda t: proj(ndgrad.conv2d(Tensor(x), t, bt, 1, 1)), k),
        _check(lambda t: proj(ndgrad.conv2d(Tensor(x), kt, t, 1, 1)), b),
        _check(lambda t: strided(ndgrad.conv2d(t, kt, None, 2, 1)), x),
    )


@register("maxpool2d")
def _maxpool2d(rng):
    proj = _projection((1, 2, 2, 2), rng)
    return _check(
        lambda t: proj(ndgrad.maxpool2d(t, 2)), rng.standard_normal((1, 2, 4, 4))
    )


@register("upsample2x")
def _upsample2x(rng):
    proj = _projection((1, 2, 6, 6), rng)
    return _check(
        lambda t: proj(ndgrad.upsample2x(t)), rng.standard_normal((1, 2, 3, 3))
    )


@register("dense")
def _dense(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(5)
    proj = _projection((3, 5), rng)
    return max(
        _check(lambda t: proj(ndgrad.dense(t, Tensor(w), Tensor(b))), x),
        _check(lambda t: proj(ndgrad.dense(Tensor(x), t, Tensor(b))), w),
        _check(lambda t: proj(ndgrad.dense(Tensor(x), Tensor(w), t)), b),
    )


@register("activations")
def _activations(rng):
    errs = []
    for kind in ("sigmoid", "tanh", "exp", "relu"):
        proj = _projection((4, 3), rng)
        errs.append(
            _check(
                lambda t, k=kind: proj(ndgrad.activation(t, k)),
                rng.standard_normal((4, 3)),
            )
        )
    for kind in ("log", "sqrt"):
        proj = _projection((4, 3), rng)
        errs.append(
            _check(
                lambda t, k=kind: proj(ndgrad.activation(t, k)),
                rng.uniform(0.5, 2.0, (4, 3)),
            )
        )
    return max(errs)


@register("reductions")
def _reductions(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    proj = _projection((3, 4), rng)
    rows = _projection((4,), rng)
    return max(
        _check(lambda t: proj(ndgrad.minimum(t, Tensor(b))), a),
        _check(lambda t: proj(ndgrad.minimum(Tensor(a), t)), b),
        _check(lambda t: proj(t.square()) + t.mean(), a),
        _check(lambda t: rows(t.sum(axis=0)), a),
        _check(lambda t: proj(t.clip(-0.5, 0.5)), a),
    )


@register("pad_edge")
def _pad_edge(rng):
    proj = _projection((1, 1, 8, 9), rng)
    return _check(
        lambda t: proj(ndgrad.pad_edge(t, 2)), rng.standard_normal((1, 1, 4, 5))
    )


@register("sobel_tensor")
def _sobel_tensor(rng):
    proj = _projection((2, 1, 6, 6), rng)
    return _check(
        lambda t: proj(imgproc.sobel_tensor(t)), rng.uniform(0.0, 0.2, (2, 1, 6, 6))
    )


def _random_theta(rng, n):
    theta = np.zeros((n, 2, 3))
    theta[:, 0, 0] = rng.uniform(0.6, 0.9, n)
    theta[:, 1, 1] = rng.uniform(0.6, 0.9, n)
    theta[:, :, 2] = rng.uniform(-0.1, 0.1, (n, 2))
    return theta


@register("bilinear_sample")
def _bilinear_sample(rng):
    src = rng.standard_normal((1, 2, 6, 7))
    theta = _random_theta(rng, 3)
    proj = _projection((3, 2, 5, 4), rng)
    return max(
        _check(lambda t: proj(stn.bilinear_sample(t, Tensor(theta), (5, 4))), src),
        _check(lambda t: proj(stn.bilinear_sample(Tensor(src), t, (5, 4))), theta),
    )


def _stitch_theta(rng, n, canvas):
    boxes = BoxParams(
        rng.uniform(3.0, canvas - 3.0, n),
        rng.uniform(3.0, canvas - 3.0, n),
        Tensor(rng.uniform(-0.5, 0.5, n)),
        Tensor(rng.uniform(-0.5, 0.5, n)),
        Tensor(rng.uniform(3.0, 5.0, n)),
        Tensor(rng.uniform(3.0, 5.0, n)),
        Tensor(np.ones(n)),
    )
    return stn.stitch_transform(boxes, (canvas, canvas)).theta.data


@register("stitch_add")
def _stitch_add(rng):
    patches = rng.uniform(0.0, 1.0, (2, 1, 4, 4))
    theta = _stitch_theta(rng, 2, 10)
    pres = rng.uniform(0.2, 0.9, 2)
    proj = _projection((1, 1, 10, 10), rng)
    canvas = (10, 10)
    return max(
        _check(
            lambda t: proj(stn.stitch_add(t, Tensor(theta), Tensor(pres), canvas)),
            patches,
        ),
        _check(
            lambda t: proj(stn.stitch_add(Tensor(patches), t, Tensor(pres), canvas)),
            theta,
        ),
        _check(
            lambda t: proj(stn.stitch_add(Tensor(patches), Tensor(theta), t, canvas)),
            pres,
        ),
    )


@register("edge_loss")
def _edge_loss(rng):
    g_img = rng.uniform(0.0, 1.0, (6, 6))
    g_rec = rng.uniform(0.05, 1.0, (1, 1, 6, 6))
    return _check(lambda t: edge_loss(g_img, t, 0.01), g_rec)


@register("kl_divergence")
def _kl_divergence(rng):
    mu = rng.standard_normal((3, 4))
    logvar = rng.uniform(-1.0, 1.0, (3, 4))
    return max(
        _check(lambda t: kl_divergence(LatentCode(t, Tensor(logvar), t)), mu),
        _check(lambda t: kl_divergence(LatentCode(Tensor(mu), t, Tensor(mu))), logvar),
    )


@register("param_map")
def _param_map(rng):
    cfg = DetectorConfig()
    weights = [_projection((4,), rng) for _ in range(6)]

    def f(t):
        g = param_map(t, cfg)
        fields = (g.presence, g.scale, g.ratio, g.x, g.y, g.log_ratio)
        total = weights[0](fields[0])
        for w, v in zip(weights[1:], fields[1:]):
            total = total + w(v)
        return total

    return _check(f, rng.standard_normal((5, 2, 2)))


def _tiny_prior() -> ShapePriorModel:
    return ShapePriorModel(latent_dim=2, base_channels=2, rng=np.random.default_rng(5))


@register("vae_loss")
def _vae_loss(rng):
    model = _tiny_prior()
    patches = Tensor(rng.uniform(0.0, 1.0, (2, 1, 32, 32)))
    layer = model.encoder["mu"]

    def f(t):
        saved = layer.bias
        layer.bias = t
        try:
            code = model.latent(patches, np.random.default_rng(7))
            return vae_loss(patches, model.decode(code.sample), code, 1.0)
        finally:
            layer.bias = saved

    return _check(
        f, layer.bias.data.copy() + rng.standard_normal(layer.bias.shape) * 0.1
    )


@register("detector_forward")
def _detector_forward(rng):
    """
    Edge loss plus KL of a single box on an 8x8 canvas, as a function of the
    offsets, the box size and the presence.
    """
    cfg = DetectorConfig()
    prior = _tiny_prior()
    image = Tensor(rng.uniform(0.0, 1.0, (1, 1, 8, 8)))
    target = rng.uniform(0.0, 1.0, (8, 8))
    x0 = np.array([0.3, -0.2, 5.3, 6.1, 0.7])

    def f(t):
        boxes = BoxParams([4.0], [4.0], t[0:1], t[1:2], t[2:3], t[3:4], t[4:5])
        res = reconstruct(image, boxes, prior, cfg, np.random.default_rng(3))
        edge = edge_loss(target, res.reconstruction, cfg.alpha)
        return total_loss(edge, res.code, 0.1, boxes.presence)

    return _check(f, x0)
