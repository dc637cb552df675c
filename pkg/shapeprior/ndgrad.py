# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

"""
Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operator set needed by the segmentation pipeline is provided. Every
operation records a `Node` in creation order when one of its inputs requires a
gradient; `backward` replays the recorded nodes in exact reverse creation order.
"""

from contextlib import contextmanager
import itertools
import json
import logging
import math
import os
import struct
import threading
from typing import (
    Callable,
    Dict,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ShapePriorDataError, ShapePriorUsageError


LOG = logging.getLogger(__name__)

if os.environ.get("SHAPEPRIOR_FLOAT64", "0") not in ("", "0"):
    _DEFAULT_DTYPE = np.float64
else:
    _DEFAULT_DTYPE = np.float32
_STATE = threading.local()
_SEQ = itertools.count()

Scalar = Union[int, float]


# ------------------------------------------------------------------------------
def default_dtype() -> type:
    return getattr(_STATE, "dtype", _DEFAULT_DTYPE)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """
    Switch the floating point type of tensors created in the current thread.
    Used by the gradient checks which need 64-bit floats for tight
    finite-difference tolerances::

        with ndgrad.precision("float64"):
            err = ndgrad.grad_check(f, x, eps=1e-6)
    """
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ShapePriorUsageError("unsupported precision: %s" % dtype)
    prev = default_dtype()
    _STATE.dtype = dtype
    try:
        yield
    finally:
        _STATE.dtype = prev


def is_grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Disable graph recording in the current thread.
    """
    prev = is_grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


# ------------------------------------------------------------------------------
class Node:
    """
    One operation record of the computation graph.
    """

    __slots__ = ("op", "inputs", "seq", "backward_fn")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.seq = next(_SEQ)
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return "Node(%s #%d)" % (self.op, self.seq)


# ------------------------------------------------------------------------------
class Tensor:
    """
    Dense array of floats with optional gradient tracking.

    Elementwise arithmetic accepts python scalars or tensors of identical shape;
    there is no broadcasting.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapePriorDataError(
                "item() needs a 1-element tensor: %s" % (self.shape,)
            )
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return "Tensor(shape=%s, requires_grad=%s%s)" % (
            self.shape,
            self.requires_grad,
            ", name=%r" % self.name if self.name else "",
        )

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, neg(other))
        return add(self, -_scalar_or(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    # unary helpers
    def sigmoid(self):
        return activation(self, "sigmoid")

    def tanh(self):
        return activation(self, "tanh")

    def exp(self):
        return activation(self, "exp")

    def relu(self):
        return activation(self, "relu")

    def log(self):
        return activation(self, "log")

    def sqrt(self):
        return activation(self, "sqrt")

    def square(self):
        return reduce(self, "square")

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self):
        return reduce(self, "mean")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def clip(self, lo: float, hi: float):
        return clip(self, lo, hi)


# ------------------------------------------------------------------------------
def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _scalar_or(value):
    if isinstance(value, (int, float, np.number)):
        return float(value)
    return value


def _is_scalar(value) -> bool:
    return isinstance(value, (int, float, np.number))


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapePriorDataError(
            "%s: shape mismatch %s vs %s" % (op, a.shape, b.shape)
        )


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str):
    """
    Wrap the result of an operation and record it in the graph.

    :arg backward_fn:
        Maps the output gradient to a tuple of input gradients, one per entry of
        ``inputs`` (None when an input needs none).
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=default_dtype())
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


# ------------------------------------------------------------------------------
class ComputationGraph:
    """
    The nodes reachable from a tensor, in creation order.
    """

    __slots__ = ("tensors",)

    def __init__(self, tensors: List[Tensor]):
        self.tensors = tensors

    @classmethod
    def from_loss(cls, loss: Tensor) -> "ComputationGraph":
        seen = set()
        found = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.seq)
        return cls(found)

    @property
    def nodes(self) -> List[Node]:
        return [t.node for t in self.tensors]

    def __len__(self) -> int:
        return len(self.tensors)


# ------------------------------------------------------------------------------
def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` of every tensor reachable from a scalar loss. Gradients of
    leaf tensors accumulate across calls until reset with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ShapePriorDataError(
            "backward needs a scalar loss, got %s" % (loss.shape,)
        )
    seed = np.ones_like(loss.data)
    if not loss.requires_grad:
        LOG.debug("backward on a tensor that does not require grad")
        return
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    graph = ComputationGraph.from_loss(loss)
    grads = {id(loss): seed}
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = np.asarray(ig, dtype=inp.data.dtype)
            if ig.shape != inp.data.shape:
                raise ShapePriorDataError(
                    "%s: gradient shape %s does not match %s"
                    % (t.node.op, ig.shape, inp.data.shape)
                )
            if inp.node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig


# ------------------------------------------------------------------------------
def add(a: Tensor, b) -> Tensor:
    b = _scalar_or(b)
    if _is_scalar(b):
        return make_op(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if not isinstance(a, Tensor):
        a, b = b, a
    b = as_tensor(b)
    _check_same_shape("add", a, b)
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    b = _scalar_or(b)
    if _is_scalar(b):
        return make_op(a.data * b, (a,), lambda g: (g * b,), "mul_scalar")
    b = as_tensor(b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a = _scalar_or(a)
    b = _scalar_or(b)
    if _is_scalar(b):
        return make_op(a.data / b, (a,), lambda g: (g / b,), "div_scalar")
    b = as_tensor(b)
    bd = b.data
    if _is_scalar(a):
        out = a / bd
        return make_op(out, (b,), lambda g: (-g * out / bd,), "rdiv_scalar")
    a = as_tensor(a)
    _check_same_shape("div", a, b)
    ad = a.data
    return make_op(
        ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div"
    )


# ------------------------------------------------------------------------------
def _open_unit(out: np.ndarray, lo: float) -> np.ndarray:
    # keep saturated values strictly inside the activation codomain
    top = 1.0 - np.finfo(out.dtype).epsneg
    return np.clip(out, lo, top)


def _sigmoid(x: np.ndarray):
    out = _open_unit(expit(x), np.finfo(x.dtype).tiny)
    return out, lambda g: g * out * (1.0 - out)


def _tanh(x: np.ndarray):
    top = 1.0 - np.finfo(x.dtype).epsneg
    out = np.clip(np.tanh(x), -top, top)
    return out, lambda g: g * (1.0 - out * out)


def _exp(x: np.ndarray):
    out = np.exp(x)
    return out, lambda g: g * out


def _relu(x: np.ndarray):
    mask = x > 0
    return x * mask, lambda g: g * mask


def _log(x: np.ndarray):
    if np.any(x <= 0):
        raise ShapePriorUsageError("log of non-positive value")
    return np.log(x), lambda g: g / x


def _sqrt(x: np.ndarray):
    if np.any(x < 0):
        raise ShapePriorUsageError("sqrt of negative value")
    out = np.sqrt(x)
    return out, lambda g: g * 0.5 / out


ACTIVATIONS = {
    "sigmoid": _sigmoid,
    "tanh": _tanh,
    "exp": _exp,
    "relu": _relu,
    "log": _log,
    "sqrt": _sqrt,
}


def activation(x: Tensor, kind: str) -> Tensor:
    """
    Elementwise activation. ``kind`` is one of sigmoid, tanh, exp, relu, log,
    sqrt. Sigmoid and tanh outputs are kept strictly inside (0, 1) and (-1, 1).
    """
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ShapePriorUsageError("unknown activation: %r" % kind) from None
    out, grad_fn = fn(x.data)
    return make_op(out, (x,), lambda g: (grad_fn(g),), kind)


# ------------------------------------------------------------------------------
def tensor_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def grad(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op(out, (x,), grad, "sum")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """
    Pixelwise minimum. The subgradient goes to the smaller argument, to ``a`` on
    ties.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    _check_same_shape("min_pairwise", a, b)
    mask = a.data <= b.data
    return make_op(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (g * mask, g * ~mask),
        "min_pairwise",
    )


def reduce(x: Tensor, kind: str, other: Optional[Tensor] = None) -> Tensor:
    """
    ``sum`` and ``mean`` collapse to a scalar, ``square`` and ``min_pairwise``
    (which needs ``other``) are elementwise.
    """
    if kind == "sum":
        return tensor_sum(x)
    if kind == "mean":
        n = x.size
        return make_op(
            x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n),), "mean"
        )
    if kind == "square":
        xd = x.data
        return make_op(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")
    if kind == "min_pairwise":
        if other is None:
            raise ShapePriorUsageError("min_pairwise needs two arguments")
        return minimum(x, other)
    raise ShapePriorUsageError("unknown reduction: %r" % kind)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return make_op(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapePriorDataError("reshape %s -> %s: %s" % (orig, shape, e)) from None
    return make_op(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    dtype = x.data.dtype

    def grad(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return make_op(np.array(x.data[index]), (x,), grad, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapePriorUsageError("stack of an empty sequence")
    for t in tensors[1:]:
        _check_same_shape("stack", tensors[0], t)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make_op(
        out,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


def pad_edge(x: Tensor, pad: int) -> Tensor:
    """
    Replicate padding of the two spatial axes of a N,C,H,W tensor.
    """
    if x.ndim != 4:
        raise ShapePriorDataError("pad_edge needs a N,C,H,W tensor: %s" % (x.shape,))
    n, c, h, w = x.shape
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    out = x.data[:, :, rows][:, :, :, cols]

    def grad(g):
        g_rows = np.zeros((n, c, h, w + 2 * pad), dtype=g.dtype)
        np.add.at(g_rows, (slice(None), slice(None), rows), g)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), cols), g_rows)
        return (gx,)

    return make_op(out, (x,), grad, "pad_edge")


# ------------------------------------------------------------------------------
def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    2D cross-correlation of a N,C,H,W input with a F,C,kh,kw kernel (zero padding).

    :returns:
        A N,F,H',W' tensor with ``H' = (H + 2*padding - kh) // stride + 1``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapePriorDataError(
            "conv2d needs 4-d input and kernel: %s, %s" % (x.shape, kernel.shape)
        )
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapePriorDataError(
            "conv2d: input has %d channels, kernel expects %d" % (c, kc)
        )
    if stride < 1 or padding < 0:
        raise ShapePriorUsageError(
            "conv2d: invalid stride/padding %d/%d" % (stride, padding)
        )
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapePriorDataError(
            "conv2d: kernel %dx%d larger than padded input %dx%d"
            % (kh, kw, h + 2 * padding, w + 2 * padding)
        )
    if bias is not None and bias.shape != (f,):
        raise ShapePriorDataError(
            "conv2d: bias shape %s, expected (%d,)" % (bias.shape, f)
        )

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(f, -1)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def grad(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gm.T @ cols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            dcols = (gm @ kmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                    ] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gk
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out, inputs, grad, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """
    Non-overlapping max pooling. The gradient goes to the first maximum of each
    window in row-major order.
    """
    if x.ndim != 4:
        raise ShapePriorDataError("maxpool2d needs a N,C,H,W tensor: %s" % (x.shape,))
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapePriorDataError(
            "maxpool2d: %dx%d is not divisible by %d" % (h, w, size)
        )
    hs, ws = h // size, w // size
    r = (
        x.data.reshape(n, c, hs, size, ws, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, hs, ws, size * size)
    )
    idx = r.argmax(axis=-1)[..., None]
    out = np.take_along_axis(r, idx, axis=-1)[..., 0]

    def grad(g):
        gr = np.zeros(r.shape, dtype=g.dtype)
        np.put_along_axis(gr, idx, g[..., None], axis=-1)
        gx = (
            gr.reshape(n, c, hs, ws, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    return make_op(out, (x,), grad, "maxpool2d")


def upsample2x(x: Tensor) -> Tensor:
    """
    Nearest neighbour upsampling by 2 of a N,C,H,W tensor.
    """
    if x.ndim != 4:
        raise ShapePriorDataError("upsample2x needs a N,C,H,W tensor: %s" % (x.shape,))
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return make_op(
        out,
        (x,),
        lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),),
        "upsample2x",
    )


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapePriorDataError(
            "dense: cannot apply %s weight to %s input" % (weight.shape, x.shape)
        )
    if bias.shape != (weight.shape[1],):
        raise ShapePriorDataError(
            "dense: bias shape %s, expected (%d,)" % (bias.shape, weight.shape[1])
        )
    xd, wd = x.data, weight.data
    return make_op(
        xd @ wd + bias.data,
        (x, weight, bias),
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
        "dense",
    )


# ------------------------------------------------------------------------------
def init_uniform(
    shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator
) -> Tensor:
    """
    Fan-in scaled uniform initialization, bound sqrt(6 / fan_in).
    """
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d:
    __slots__ = ("weight", "bias", "stride", "padding")

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: Optional[int] = None,
    ):
        self.weight = init_uniform(
            (out_channels, in_channels, size, size), in_channels * size * size, rng
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.stride = stride
        self.padding = size // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


class Dense:
    __slots__ = ("weight", "bias")

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = init_uniform((in_features, out_features), in_features, rng)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


# ------------------------------------------------------------------------------
class OptimizerState:
    """
    Moment buffers and hyperparameters of the bias-corrected adaptive moment
    optimizer.
    """

    __slots__ = ("m", "v", "step", "lr", "beta1", "beta2", "eps")

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimizerState,
) -> Tuple[Sequence[Tensor], OptimizerState]:
    """
    One bias-corrected adaptive moment update, in place. Parameters that do not
    require a gradient (frozen) are left untouched; a missing gradient counts as
    zero.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapePriorDataError(
            "adam_step: %d params, %d grads, %d moment buffers"
            % (len(params), len(grads), len(state.m))
        )
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not p.requires_grad:
            continue
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ShapePriorDataError(
                "adam_step: shape mismatch for parameter %d: %s" % (i, p.data.shape)
            )
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        update = state.lr * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    return params, state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, **kwargs):
        self.params = list(params)
        self.state = OptimizerState(self.params, lr=lr, **kwargs)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


# ------------------------------------------------------------------------------
def grad_check(
    f: Callable[[Tensor], Tensor], x, eps: float = 1e-3
) -> float:
    """
    Compare the gradient computed by `backward` with central finite differences.

    :arg f:
        Deterministic function mapping a tensor to a scalar tensor.
    :arg x:
        The point (tensor or array) where the gradient is checked.
    :arg eps:
        Finite difference step.

    :returns:
        The maximal relative error over all coordinates, with denominator
        ``max(|analytic|, |numeric|, 1e-6)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=default_dtype())
    xt = Tensor(x0, requires_grad=True)
    loss = f(xt)
    backward(loss)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy()
            xp.flat[i] += eps
            fp = f(Tensor(xp)).item()
            xm = x0.copy()
            xm.flat[i] -= eps
            fm = f(Tensor(xm)).item()
            numeric.flat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    err = float(np.max(np.abs(analytic - numeric) / denom))
    LOG.debug("grad_check: %d coordinates, max relative error %.3g", x0.size, err)
    return err


# ------------------------------------------------------------------------------
WEIGHTS_MAGIC = b"SHPRIOR1"
_HEADER = struct.Struct("<8sQ")


def save_weights(
    path: str,
    tensors: Mapping[str, Union[Tensor, np.ndarray]],
    meta: Optional[Dict] = None,
) -> None:
    """
    Write a weight container: magic, manifest length, UTF-8 JSON manifest
    (name, shape, offset, length per tensor, plus free-form meta) and the
    little-endian float32 payloads concatenated in manifest order.
    """
    entries = []
    payloads = []
    offset = 0
    for name, t in tensors.items():
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        raw = np.ascontiguousarray(data, dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(data.shape),
                "offset": offset,
                "length": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"tensors": entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(WEIGHTS_MAGIC, len(manifest)))
        f.write(manifest)
        for raw in payloads:
            f.write(raw)


def load_weights(path: str) -> Tuple[Dict[str, np.ndarray], Dict]:
    """
    Read a weight container written by `save_weights`.

    :returns:
        A (name -> float32 array, meta) tuple, arrays in manifest order.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise ShapePriorDataError("%s: truncated weight container" % path)
    magic, size = _HEADER.unpack_from(blob)
    if magic != WEIGHTS_MAGIC:
        raise ShapePriorDataError("%s: not a weight container" % path)
    start = _HEADER.size + size
    try:
        manifest = json.loads(blob[_HEADER.size : start].decode("utf-8"))
    except ValueError as e:
        raise ShapePriorDataError("%s: bad manifest: %s" % (path, e)) from None
    payload = memoryview(blob)[start:]
    arrays = {}
    for e in manifest["tensors"]:
        expected = 4 * int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + e["length"]
        if e["length"] != expected or end > len(payload):
            raise ShapePriorDataError("%s: corrupt entry %r" % (path, e["name"]))
        arrays[e["name"]] = (
            np.frombuffer(payload[e["offset"] : end], dtype="<f4")
            .reshape(e["shape"])
            .astype(np.float32)
        )
    return arrays, manifest.get("meta", {})
