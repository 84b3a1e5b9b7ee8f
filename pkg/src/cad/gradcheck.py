"""Central finite-difference checks of every differentiable op, in float64."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from cad import ops
from cad.adapter import AdapterConfig, adapter_forward, apply_adapter, init_adapter
from cad.backbone import BackboneConfig, InBlockAdapterConfig, backbone_forward, init_backbone, init_inblock_adapters
from cad.seg import DecoderConfig, bce_with_logits, decoder_forward, init_decoder, seg_loss, soft_iou_loss
from cad.spectral import build_adapter_input
from cad.tensor import Tensor, backward

FD_STEP = 1e-5
TOLERANCE = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / max(1e-8, |numeric|) over elements."""
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))))


def numeric_grad(loss_fn: Callable[[], Tensor], target: Tensor, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check(loss_fn: Callable[[], Tensor], targets: dict[str, Tensor], h: float = FD_STEP) -> dict[str, float]:
    """Relative error of the tape gradient against central differences, per target."""
    for t in targets.values():
        t.grad = None
    backward(loss_fn())
    out = {}
    for name, t in targets.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        out[name] = rel_error(analytic, numeric_grad(loss_fn, t, h))
    return out


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng: np.random.Generator, *shape, lo=-1.0, hi=1.0, away_from_zero: bool = False) -> Tensor:
    x = rng.uniform(lo, hi, size=shape)
    if away_from_zero:
        # keep kinks out of the finite-difference stencil
        x = np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05, x)
    return Tensor(x, requires_grad=True)


def op_cases(seed: int = 0) -> dict[str, Callable[[], dict[str, float]]]:
    """One thunk per op; each returns per-input max relative error."""
    rng = np.random.default_rng(seed)

    def probe(out: Tensor, w: np.ndarray) -> Tensor:
        return ops.weighted_sum(out, w)

    cases = {}

    x, w, b = _leaf(rng, 2, 3, 5, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    r_conv = rng.normal(size=(2, 4, 5, 6))
    cases["conv2d"] = lambda: check(lambda: probe(ops.conv2d(x, w, b), r_conv), {"input": x, "weight": w, "bias": b})

    px, pw, pb = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 5, 3, 1, 1), _leaf(rng, 5)
    r_pw = rng.normal(size=(2, 5, 4, 4))
    cases["pointwise_conv"] = lambda: check(
        lambda: probe(ops.pointwise_conv(px, pw, pb), r_pw), {"input": px, "weight": pw, "bias": pb}
    )

    qx, qw, qb = _leaf(rng, 2, 3, 8, 8), _leaf(rng, 4, 3, 4, 4), _leaf(rng, 4)
    r_patch = rng.normal(size=(2, 4, 2, 2))
    cases["patch_conv"] = lambda: check(
        lambda: probe(ops.patch_conv(qx, qw, qb), r_patch), {"input": qx, "weight": qw, "bias": qb}
    )

    lx = _leaf(rng, 3, 4, away_from_zero=True)
    r_l = rng.normal(size=(3, 4))
    cases["leaky_relu"] = lambda: check(lambda: probe(ops.leaky_relu(lx, 0.01), r_l), {"input": lx})

    bx, bg, bb = _leaf(rng, 3, 2, 3, 3), _leaf(rng, 2, lo=0.5, hi=1.5), _leaf(rng, 2)
    r_bn = rng.normal(size=(3, 2, 3, 3))
    st = ops.BatchNormState.fresh(2, np.float64)
    cases["batchnorm2d"] = lambda: check(
        lambda: probe(ops.batchnorm2d(bx, bg, bb, st, train=True), r_bn), {"input": bx, "gamma": bg, "beta": bb}
    )
    ev = ops.BatchNormState(rng.normal(size=2), rng.uniform(0.5, 2.0, size=2))
    cases["batchnorm2d_eval"] = lambda: check(
        lambda: probe(ops.batchnorm2d(bx, bg, bb, ev, train=False), r_bn), {"input": bx, "gamma": bg, "beta": bb}
    )

    ax = _leaf(rng, 2, 2, 4, 6)
    r_a = rng.normal(size=(2, 2, 2, 3))
    cases["avgpool2"] = lambda: check(lambda: probe(ops.avgpool2(ax), r_a), {"input": ax})

    adx = _leaf(rng, 1, 2, 7, 5)
    r_ad = rng.normal(size=(1, 2, 3, 2))
    cases["adaptive_avgpool"] = lambda: check(lambda: probe(ops.adaptive_avgpool(adx, 3, 2), r_ad), {"input": adx})

    ux = _leaf(rng, 1, 2, 3, 3)
    r_u = rng.normal(size=(1, 2, 6, 6))
    cases["upsample_nearest2"] = lambda: check(lambda: probe(ops.upsample_nearest2(ux), r_u), {"input": ux})

    tx = _leaf(rng, 4, 5, lo=-2, hi=2)
    r_t = rng.normal(size=(4, 5))
    cases["tanh"] = lambda: check(lambda: probe(ops.tanh(tx), r_t), {"input": tx})
    cases["sigmoid"] = lambda: check(lambda: probe(ops.sigmoid(tx), r_t), {"input": tx})
    cases["scale"] = lambda: check(lambda: probe(ops.scale(tx, 0.1), r_t), {"input": tx})
    ty = _leaf(rng, 4, 5)
    cases["add"] = lambda: check(lambda: probe(ops.add(tx, ty), r_t), {"a": tx, "b": ty})

    zx = _leaf(rng, 2, 1, 4, 4, lo=-3, hi=3)
    yt = (rng.uniform(size=(2, 1, 4, 4)) < 0.4).astype(np.float64)
    cases["bce_with_logits"] = lambda: check(lambda: bce_with_logits(zx, yt), {"logits": zx})
    cases["soft_iou_loss"] = lambda: check(lambda: soft_iou_loss(zx, yt), {"logits": zx})
    return cases


def tiny_configs(size: int = 16, embed_dim: int = 8):
    bcfg = BackboneConfig(patch=8, embed_dim=embed_dim, depth=2, hidden_mult=2, seed=3)
    eh = size // bcfg.patch
    acfg = AdapterConfig(embed_dim=embed_dim, embed_h=eh, embed_w=eh, block_channels=(4, 4, 4))
    stages = int(np.log2(size // eh))
    dcfg = DecoderConfig(channels=(4,) * stages)
    return bcfg, acfg, dcfg


def _randomize(tensors, rng: np.random.Generator, spread: float = 0.5) -> None:
    for t in tensors:
        t.data = t.data.astype(np.float64) + rng.uniform(-spread, spread, size=t.shape)


def full_graph_case(mode: str = "cad", size: int = 16, embed_dim: int = 8, seed: int = 0) -> dict[str, float]:
    """Every trainable parameter of the assembled model against central differences."""
    rng = np.random.default_rng(seed)
    bcfg, acfg, dcfg = tiny_configs(size, embed_dim)
    backbone = init_backbone(bcfg, np.float64)
    decoder = init_decoder(dcfg, embed_dim, seed, np.float64)
    images = rng.uniform(size=(2, 3, size, size))
    target = (rng.uniform(size=(2, 1, size, size)) < 0.3).astype(np.float64)
    targets = dict(decoder)
    _randomize(decoder.values(), rng, 0.2)
    if mode == "cad":
        adapter = init_adapter(acfg, seed + 1, np.float64)
        _randomize(adapter.parameters(), rng, 0.5)
        targets.update(adapter.named_parameters())
        adapter_in = build_adapter_input(images)
        emb = Tensor(backbone_forward(Tensor(images), backbone).data)

        def loss_fn():
            delta = adapter_forward(adapter_in, adapter, acfg, train=True)
            return seg_loss(decoder_forward(apply_adapter(emb, delta), decoder, dcfg), target)

    elif mode == "inblock":
        inblock = init_inblock_adapters(bcfg, InBlockAdapterConfig(), seed + 2, np.float64)
        _randomize(inblock.values(), rng, 0.3)
        targets.update(inblock)
        img_t = Tensor(images)

        def loss_fn():
            return seg_loss(decoder_forward(backbone_forward(img_t, backbone, inblock), decoder, dcfg), target)

    else:
        emb = Tensor(backbone_forward(Tensor(images), backbone).data)

        def loss_fn():
            return seg_loss(decoder_forward(emb, decoder, dcfg), target)

    for t in targets.values():
        t.requires_grad = True
    return check(loss_fn, targets)


def run_suite(seed: int = 0, full_graph: bool = True) -> list[CheckResult]:
    results = []
    for name, thunk in op_cases(seed).items():
        t0 = time.perf_counter()
        errs = thunk()
        results.append(CheckResult(name, max(errs.values()), time.perf_counter() - t0))
    if full_graph:
        for mode in ("decoder", "cad", "inblock"):
            t0 = time.perf_counter()
            errs = full_graph_case(mode, seed=seed)
            results.append(CheckResult(f"graph[{mode}]", max(errs.values()), time.perf_counter() - t0))
    return results
