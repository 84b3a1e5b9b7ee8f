"""Mask-decoder stand-in, segmentation losses, metrics, and AdamW."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cad import ops
from cad.data import Rng
from cad.errors import ConfigError, ContractError, ShapeError
from cad.tensor import Tensor, parameter

IOU_SMOOTH = 1.0
THRESHOLD = 0.5


@dataclass(frozen=True)
class DecoderConfig:
    """``channels[i]`` is the width after upsampling stage i."""

    channels: tuple[int, ...] = (32, 16, 8)
    lrelu_slope: float = ops.LEAKY_SLOPE

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"decoder.channels must be non-empty positive widths, got {self.channels}")

    @property
    def stages(self) -> int:
        return len(self.channels)

    def check(self, embed_hw: tuple[int, int], image_hw: tuple[int, int]) -> None:
        k = 2**self.stages
        if (embed_hw[0] * k, embed_hw[1] * k) != tuple(image_hw):
            raise ShapeError(
                f"decoder with {self.stages} stages maps {embed_hw} to "
                f"{(embed_hw[0] * k, embed_hw[1] * k)}, not image size {tuple(image_hw)}"
            )


def init_decoder(cfg: DecoderConfig, embed_dim: int, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    rng = Rng(seed)
    named = {}
    cin = embed_dim
    for i, cout in enumerate(cfg.channels):
        named[f"decoder.stage{i}.weight"] = ops.he_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype=dtype)
        named[f"decoder.stage{i}.bias"] = np.zeros(cout, dtype)
        cin = cout
    named["decoder.head.weight"] = ops.he_uniform(rng, (1, cin, 1, 1), cin, dtype=dtype)
    named["decoder.head.bias"] = np.zeros(1, dtype)
    return {k: parameter(v, k) for k, v in named.items()}


def decoder_forward(embedding: Tensor, params: dict[str, Tensor], cfg: DecoderConfig) -> Tensor:
    """(N, D, h, w) embedding -> (N, 1, h*2^k, w*2^k) logits."""
    x = embedding
    for i in range(cfg.stages):
        x = ops.upsample_nearest2(x)
        x = ops.conv2d(x, params[f"decoder.stage{i}.weight"], params[f"decoder.stage{i}.bias"])
        x = ops.leaky_relu(x, cfg.lrelu_slope)
    return ops.pointwise_conv(x, params["decoder.head.weight"], params["decoder.head.bias"])


# ---------------------------------------------------------------- losses


def _check_target(logits: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if target.shape != logits.shape:
        raise ShapeError(f"target shape {target.shape} differs from logits {logits.shape}")
    if not np.all((target == 0) | (target == 1)):
        raise ContractError("segmentation targets must be binary")
    return target.astype(logits.dtype)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, via max(z,0) - z*y + log1p(exp(-|z|))."""
    y = _check_target(logits, target)
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean(), dtype=z.dtype).reshape(1)
    inv = z.dtype.type(1.0 / z.size)

    def _backward(g: np.ndarray):
        return ((ops.stable_sigmoid(z) - y) * (g.reshape(()) * inv),)

    return Tensor.from_op("bce_with_logits", out, (logits,), _backward, saved_elems=z.size)


def soft_iou_loss(logits: Tensor, target: np.ndarray, smooth: float = IOU_SMOOTH) -> Tensor:
    """1 - (sum p*y + s) / (sum(p + y - p*y) + s) with p = sigmoid(logits)."""
    y = _check_target(logits, target)
    p = ops.stable_sigmoid(logits.data)
    inter = (p * y).sum() + smooth
    union = (p + y - p * y).sum() + smooth
    out = np.asarray(1.0 - inter / union, dtype=p.dtype).reshape(1)

    def _backward(g: np.ndarray):
        # d/dp of -inter/union, chained through sigmoid
        dp = -(y * union - (1 - y) * inter) / (union * union)
        return ((g.reshape(()) * dp * p * (1 - p)).astype(p.dtype),)

    return Tensor.from_op("soft_iou_loss", out, (logits,), _backward, saved_elems=p.size)


def seg_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Unweighted BCE + soft IoU."""
    return ops.add(bce_with_logits(logits, target), soft_iou_loss(logits, target))


# ---------------------------------------------------------------- metrics


def predict_mask(logits: np.ndarray) -> np.ndarray:
    return (ops.stable_sigmoid(np.asarray(logits, dtype=np.float64)) > THRESHOLD).astype(np.uint8)


def dice_iou(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Dice and IoU of two binary masks; two empty masks score 1.0 on both."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


@dataclass
class EvalResult:
    dice: float
    iou: float
    per_sample: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"dice": self.dice, "iou": self.iou, "per_sample": self.per_sample}


def evaluate_masks(preds, gts, ids=None) -> EvalResult:
    rows = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        d, j = dice_iou(p, g)
        rows.append({"id": ids[i] if ids is not None else i, "dice": d, "iou": j})
    if not rows:
        raise ContractError("cannot evaluate an empty set")
    return EvalResult(
        dice=float(np.mean([r["dice"] for r in rows])),
        iou=float(np.mean([r["iou"] for r in rows])),
        per_sample=rows,
    )


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamWHyper:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2


class AdamW:
    """Adam with decoupled weight decay and bias correction.

    Each step applies ``theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta``
    where the decay term uses the pre-step ``theta``.
    """

    def __init__(self, params: list[Tensor], hyper: AdamWHyper | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.hyper = hyper or AdamWHyper()
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        h = self.hyper
        b1, b2 = h.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            p.data = (p.data - h.lr * m_hat / (np.sqrt(v_hat) + h.eps) - h.lr * h.weight_decay * p.data).astype(
                p.dtype
            )
