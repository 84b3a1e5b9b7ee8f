import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cad.errors import ContractError, ShapeError
from cad.seg import (
    AdamW,
    AdamWHyper,
    DecoderConfig,
    bce_with_logits,
    decoder_forward,
    dice_iou,
    evaluate_masks,
    init_decoder,
    predict_mask,
    seg_loss,
    soft_iou_loss,
)
from cad.tensor import Tensor, backward


def count_oracle(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        tp += p and g
        fp += p and not g
        fn += g and not p
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


def z64(x):
    return Tensor(np.asarray(x, dtype=np.float64).reshape(1, 1, 1, -1), requires_grad=True)


# ------------------------------------------------------------------ decoder


def test_decoder_shape_and_determinism():
    cfg = DecoderConfig((32, 16, 8))
    emb = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 32, 8, 8)).astype(np.float32))
    a = decoder_forward(emb, init_decoder(cfg, 32, 3), cfg).data
    b = decoder_forward(emb, init_decoder(cfg, 32, 3), cfg).data
    assert a.shape == (1, 1, 64, 64) and np.array_equal(a, b)


def test_decoder_check_and_params():
    cfg = DecoderConfig((4, 4))
    with pytest.raises(ShapeError):
        cfg.check((8, 8), (64, 64))
    cfg.check((16, 16), (64, 64))
    params = init_decoder(cfg, 8, 0)
    assert all(t.requires_grad for t in params.values())
    assert sum(t.size for t in params.values()) == (8 * 4 * 9 + 4) + (4 * 4 * 9 + 4) + (4 + 1)


# ------------------------------------------------------------------ losses


def test_bce_examples():
    assert bce_with_logits(z64([0.0]), np.ones((1, 1, 1, 1))).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bce_with_logits(z64([60.0]), np.ones((1, 1, 1, 1))).item() < 1e-20
    z = np.array([-50.0])
    naive = -math.log(1 - 1 / (1 + math.exp(50.0)))
    assert bce_with_logits(z64(z), np.zeros((1, 1, 1, 1))).item() == pytest.approx(naive, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e4, 1e4)), arrays(np.int8, 6, elements=st.integers(0, 1)))
def test_bce_finite_for_large_logits(z, y):
    with np.errstate(over="raise", invalid="raise"):
        v = bce_with_logits(z64(z), y.reshape(1, 1, 1, -1)).item()
    assert math.isfinite(v) and v >= 0


def test_soft_iou_examples():
    y = np.array([1.0, 1.0, 0.0, 0.0]).reshape(1, 1, 1, 4)
    assert soft_iou_loss(z64([0.0] * 4), y).item() == pytest.approx(0.5, abs=1e-12)
    assert soft_iou_loss(z64([-80.0] * 4), np.zeros_like(y)).item() == pytest.approx(0.0, abs=1e-12)
    assert soft_iou_loss(z64([80, 80, -80, -80]), y).item() == pytest.approx(0.0, abs=1e-12)


def test_targets_must_be_binary():
    with pytest.raises(ContractError):
        bce_with_logits(z64([0.0, 1.0]), np.array([0.5, 1.0]).reshape(1, 1, 1, 2))
    with pytest.raises(ShapeError):
        soft_iou_loss(z64([0.0, 1.0]), np.ones((1, 1, 1, 3)))


def test_seg_loss_is_unweighted_sum():
    rng = np.random.default_rng(1)
    z = z64(rng.normal(size=8))
    y = (rng.uniform(size=(1, 1, 1, 8)) < 0.5).astype(float)
    total = seg_loss(z, y).item()
    assert total == pytest.approx(bce_with_logits(z, y).item() + soft_iou_loss(z, y).item(), abs=1e-15)


def test_tiny_step_does_not_increase_loss():
    rng = np.random.default_rng(2)
    cfg = DecoderConfig((4, 4))
    params = init_decoder(cfg, 6, 0, np.float64)
    emb = Tensor(rng.uniform(-1, 1, (2, 6, 4, 4)))
    y = (rng.uniform(size=(2, 1, 16, 16)) < 0.3).astype(float)
    opt = AdamW(list(params.values()), AdamWHyper(lr=1e-6))
    before = seg_loss(decoder_forward(emb, params, cfg), y)
    backward(before)
    opt.step()
    after = seg_loss(decoder_forward(emb, params, cfg), y)
    assert after.item() <= before.item() + 1e-6


# ------------------------------------------------------------------ metrics


def test_dice_iou_examples():
    a = np.zeros((4, 4), np.uint8)
    a[0, :] = 1
    assert dice_iou(a, a) == (1.0, 1.0)
    b = np.zeros_like(a)
    b[3, :] = 1
    assert dice_iou(a, b) == (0.0, 0.0)
    c = np.zeros_like(a)
    c[0, :2] = 1
    c[1, :2] = 1
    d, j = dice_iou(a, c)
    assert d == 0.5 and j == pytest.approx(1 / 3, abs=0)
    assert dice_iou(np.zeros((3, 3)), np.zeros((3, 3))) == (1.0, 1.0)
    with pytest.raises(ShapeError):
        dice_iou(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.uint8, (8, 8), elements=st.integers(0, 1)), arrays(np.uint8, (8, 8), elements=st.integers(0, 1)))
def test_dice_at_least_iou(a, b):
    d, j = dice_iou(a, b)
    assert d == count_oracle(a.astype(bool), b.astype(bool))[0]
    if a.any() or b.any():
        assert d >= j


def test_predict_mask_threshold():
    np.testing.assert_array_equal(predict_mask(np.array([-1.0, 0.0, 1e-9, 3.0])), [0, 0, 1, 1])


def test_evaluate_masks_json():
    masks = [np.eye(3, dtype=np.uint8), np.zeros((3, 3), np.uint8)]
    res = evaluate_masks(masks, masks, ["a", "b"])
    assert res.dice == 1.0 and res.iou == 1.0
    js = res.to_json()
    assert set(js) == {"dice", "iou", "per_sample"} and js["per_sample"][0]["id"] == "a"
    with pytest.raises(ContractError):
        evaluate_masks([], [])


# ------------------------------------------------------------------ AdamW


def hand_adamw(theta, g, m, v, t, lr, b1, b2, eps, wd):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1**t)
    vh = v / (1 - b2**t)
    return theta - lr * mh / (np.sqrt(vh) + eps) - lr * wd * theta, m, v


def test_adamw_scalar_example():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p], AdamWHyper(lr=1e-3, weight_decay=0.0))
    p.grad = np.array([1.0])
    opt.step()
    assert abs(p.data[0] - (1 - 1e-3 / (1 + 1e-8))) < 1e-12


def test_adamw_matches_hand_update_over_steps():
    rng = np.random.default_rng(3)
    hyper = AdamWHyper(lr=3e-3, betas=(0.85, 0.99), eps=1e-7, weight_decay=0.05)
    theta = rng.normal(size=(3, 4))
    p = Tensor(theta.copy(), requires_grad=True)
    opt = AdamW([p], hyper)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t in range(1, 6):
        g = rng.normal(size=theta.shape)
        p.grad = g.copy()
        opt.step()
        theta, m, v = hand_adamw(theta, g, m, v, t, hyper.lr, *hyper.betas, hyper.eps, hyper.weight_decay)
        assert np.max(np.abs(p.data - theta)) < 1e-12


def test_adamw_zero_grad_and_pure_decay():
    p = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    opt = AdamW([p], AdamWHyper(weight_decay=0.0))
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [2.0, -1.0])
    q = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    opt = AdamW([q], AdamWHyper(lr=0.1, weight_decay=0.5))
    q.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(q.data, np.array([2.0, -1.0]) * (1 - 0.05), atol=1e-15)


def test_adamw_skips_frozen_and_gradless():
    frozen = Tensor(np.ones(2))
    live = Tensor(np.ones(2), requires_grad=True)
    opt = AdamW([frozen, live])
    assert opt.params == [live]
    opt.step()
    np.testing.assert_array_equal(live.data, np.ones(2))
    opt.zero_grad()
    assert live.grad is None
