"""Differentiable numeric kernels.

All spatial tensors are NCHW. Shapes must match exactly; the only broadcast is
a per-channel bias inside the convolutions.

``saved_elems`` passed to :meth:`Tensor.from_op` follows one fixed table,
which the memory model reuses:

=====================  ==========================
op                     retained for backward
=====================  ==========================
conv2d / pointwise     input
patch_conv             input
batchnorm2d            normalized input
leaky_relu, tanh,      output
sigmoid
avgpool2, adaptive,    nothing (shapes only)
upsample, add, scale,
sum
=====================  ==========================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cad.errors import ShapeError
from cad.tensor import Tensor

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_rank(x: Tensor, rank: int, what: str) -> None:
    if x.data.ndim != rank:
        raise ShapeError(f"{what}: expected rank {rank}, got shape {x.shape}")


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor, k: int, what: str) -> None:
    _check_rank(x, 4, what)
    if w.data.ndim != 4 or w.shape[2:] != (k, k):
        raise ShapeError(f"{what}: weight must be (Cout, Cin, {k}, {k}), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"{what}: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"{what}: bias must be ({w.shape[0]},), got {b.shape}")


def _im2col3(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Padded (N, C, H+2, W+2) -> (N, C*9, H*W), tap index fastest within a channel."""
    n, c = xp.shape[:2]
    taps = [xp[:, :, ki : ki + h, kj : kj + w] for ki in range(3) for kj in range(3)]
    return np.stack(taps, axis=2).reshape(n, c * 9, h * w)


def _conv3_same(x: np.ndarray, wmat: np.ndarray) -> np.ndarray:
    """Plain 3x3 'same' correlation of (N, C, H, W) with (Cout, C*9) weights, no bias."""
    n, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return np.matmul(wmat, _im2col3(xp, h, w)).reshape(n, wmat.shape[0], h, w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1."""
    _check_conv_args(x, weight, bias, 3, "conv2d")
    n, c, h, w = x.shape
    cout = weight.shape[0]
    wmat = weight.data.reshape(cout, c * 9)
    out = _conv3_same(x.data, wmat) + bias.data[None, :, None, None]

    def _backward(g: np.ndarray):
        gx = gw = gb = None
        if weight.requires_grad:
            xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
            cols = _im2col3(xp, h, w)
            gw = np.matmul(g.reshape(n, cout, h * w), cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            # input gradient = correlation with the spatially flipped, channel-transposed kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, cout * 9)
            gx = _conv3_same(g, np.ascontiguousarray(wflip))
        return gx, gw, gb

    return Tensor.from_op("conv2d", out, (x, weight, bias), _backward, saved_elems=x.size)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution: a per-pixel affine map over channels."""
    _check_conv_args(x, weight, bias, 1, "pointwise_conv")
    n, c, h, w = x.shape
    cout = weight.shape[0]
    wmat = weight.data.reshape(cout, c)
    xf = x.data.reshape(n, c, h * w)
    out = (np.matmul(wmat, xf) + bias.data[None, :, None]).reshape(n, cout, h, w)

    def _backward(g: np.ndarray):
        gf = g.reshape(n, cout, h * w)
        gx = np.matmul(wmat.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = np.einsum("nop,nip->oi", gf, xf).reshape(weight.shape) if weight.requires_grad else None
        gb = gf.sum(axis=(0, 2)) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor.from_op("pointwise_conv", out, (x, weight, bias), _backward, saved_elems=x.size)


def patch_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Non-overlapping p x p convolution with stride p (patch embedding)."""
    _check_rank(x, 4, "patch_conv")
    p = weight.shape[-1]
    _check_conv_args(x, weight, bias, p, "patch_conv")
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"patch_conv: spatial dims {(h, w)} not divisible by patch {p}")
    hp, wp = h // p, w // p
    cout = weight.shape[0]
    cols = x.data.reshape(n, c, hp, p, wp, p).transpose(0, 2, 4, 1, 3, 5).reshape(n * hp * wp, c * p * p)
    wmat = weight.data.reshape(cout, c * p * p)
    out = (cols @ wmat.T).reshape(n, hp, wp, cout).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _backward(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = (g2 @ wmat).reshape(n, hp, wp, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(x.shape)
        return gx, gw, gb

    return Tensor.from_op("patch_conv", out, (x, weight, bias), _backward, saved_elems=x.size)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    out = np.where(x.data >= 0, x.data, x.data * x.dtype.type(slope))

    def _backward(g: np.ndarray):
        # out >= 0 exactly where x >= 0, so the output alone fixes the branch
        return (np.where(out >= 0, g, g * g.dtype.type(slope)),)

    return Tensor.from_op("leaky_relu", out, (x,), _backward, saved_elems=out.size)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> BatchNormState:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with the biased batch variance and moves the running
    statistics toward the batch ones by ``state.momentum``. Eval mode uses the
    running statistics as constants.
    """
    _check_rank(x, 4, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must be ({c},)")
    m = n * h * w
    dt = x.dtype.type
    if train:
        if m < 2:
            raise ShapeError("batchnorm2d: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * var
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    invstd = (1.0 / np.sqrt(var + dt(state.eps))).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def _backward(g: np.ndarray):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if train:
                s1 = gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (invstd[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * invstd[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor.from_op("batchnorm2d", out, (x, gamma, beta), _backward, saved_elems=xhat.size)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 mean pooling, stride 2."""
    _check_rank(x, 4, "avgpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: spatial dims must be even, got {(h, w)}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def _backward(g: np.ndarray):
        q = g * g.dtype.type(0.25)
        return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

    return Tensor.from_op("avgpool2", out, (x,), _backward)


def adaptive_pool_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i averages input indices [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out))."""
    mat = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def adaptive_avgpool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check_rank(x, 4, "adaptive_avgpool")
    n, c, h, w = x.shape
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise ShapeError(f"adaptive_avgpool: cannot pool {(h, w)} to {(out_h, out_w)}")
    ah = adaptive_pool_matrix(h, out_h, x.dtype)
    aw = adaptive_pool_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def _backward(g: np.ndarray):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return Tensor.from_op("adaptive_avgpool", out, (x,), _backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    _check_rank(x, 4, "upsample_nearest2")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def _backward(g: np.ndarray):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor.from_op("upsample_nearest2", out, (x,), _backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def _backward(g: np.ndarray):
        return (g * (1 - out * out),)

    return Tensor.from_op("tanh", out, (x,), _backward, saved_elems=out.size)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + ez), ez / (1 + ez))


def sigmoid(x: Tensor) -> Tensor:
    out = stable_sigmoid(x.data)

    def _backward(g: np.ndarray):
        return (g * out * (1 - out),)

    return Tensor.from_op("sigmoid", out, (x,), _backward, saved_elems=out.size)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    out = a.data + b.data
    return Tensor.from_op("add", out, (a, b), lambda g: (g, g))


def scale(x: Tensor, s: float) -> Tensor:
    k = x.dtype.type(s)
    return Tensor.from_op("scale", x.data * k, (x,), lambda g: (g * k,))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1)
    return Tensor.from_op("sum", out, (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def he_uniform(rng, shape: tuple[int, ...], fan_in: int, gain: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Uniform in +-gain*sqrt(6/fan_in), drawn from a :class:`cad.data.Rng`."""
    bound = gain * math.sqrt(6.0 / fan_in)
    u = rng.uniform(int(np.prod(shape)))
    return ((2.0 * u - 1.0) * bound).reshape(shape).astype(dtype)


@dataclass
class ConvBlockParams:
    """3x3 conv -> leaky ReLU -> batch norm -> 2x2 average pool."""

    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState = field(repr=False)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias, self.gamma, self.beta]


def conv_block(x: Tensor, p: ConvBlockParams, slope: float, train: bool) -> Tensor:
    y = conv2d(x, p.weight, p.bias)
    y = leaky_relu(y, slope)
    y = batchnorm2d(y, p.gamma, p.beta, p.bn, train)
    return avgpool2(y)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) for a constant weight array; a probe loss for gradient checks."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs input {x.shape}")
    out = np.asarray((x.data * weights).sum(), dtype=x.dtype).reshape(1)
    return Tensor.from_op("sum", out, (x,), lambda g: (g.reshape(()) * weights,))
