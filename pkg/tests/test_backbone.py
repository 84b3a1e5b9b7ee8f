import json

import numpy as np
import pytest

from cad.adapter import AdapterConfig
from cad.backbone import (
    BackboneConfig,
    InBlockAdapterConfig,
    backbone_forward,
    cache_root,
    embed_images,
    fnv1a64,
    init_backbone,
    init_inblock_adapters,
    load_cached_embeddings,
    precompute_embeddings,
)
from cad.data import gen_dataset
from cad.errors import ConfigError, ShapeError, StaleCacheError
from cad.model import build_model
from cad.seg import AdamW, DecoderConfig, seg_loss
from cad.tensor import Tensor, backward

SMALL = BackboneConfig(patch=8, embed_dim=8, depth=2)


def small_model(mode, depth=2):
    b = BackboneConfig(patch=8, embed_dim=8, depth=depth)
    a = AdapterConfig(embed_dim=8, embed_h=2, embed_w=2, block_channels=(4, 4, 4))
    return build_model(mode, b, a, DecoderConfig((4, 4, 4)), seed=0)


def test_shape_range_and_determinism():
    img = np.random.default_rng(0).uniform(size=(1, 3, 64, 64)).astype(np.float32)
    p = init_backbone(BackboneConfig())
    e1 = backbone_forward(Tensor(img), p).data
    e2 = backbone_forward(Tensor(img), init_backbone(BackboneConfig())).data
    assert e1.shape == (1, 32, 8, 8)
    assert np.all(np.abs(e1) < 1)
    assert np.array_equal(e1, e2)


def test_trunk_is_frozen():
    p = init_backbone(SMALL)
    assert all(not t.requires_grad for t in p.named.values())
    assert set(p.named) == {"backbone.patch.weight", "backbone.patch.bias"} | {
        f"backbone.block{i}.{k}" for i in range(2) for k in ("w1", "b1", "w2", "b2")
    }


def test_indivisible_image_rejected():
    with pytest.raises(ShapeError):
        backbone_forward(Tensor(np.zeros((1, 3, 20, 16))), init_backbone(SMALL))
    with pytest.raises(ShapeError):
        backbone_forward(Tensor(np.zeros((1, 1, 16, 16))), init_backbone(SMALL))


def test_embed_images_is_batch_independent():
    imgs = np.random.default_rng(1).uniform(size=(3, 3, 16, 16)).astype(np.float32)
    p = init_backbone(SMALL)
    batched = embed_images(imgs, p)
    single = embed_images(imgs[1:2], p)
    assert np.array_equal(batched[1:2], single)


def test_fresh_inblock_adapters_leave_embedding_unchanged():
    img = Tensor(np.random.default_rng(2).uniform(size=(2, 3, 16, 16)))
    p = init_backbone(SMALL, np.float64)
    ad = init_inblock_adapters(SMALL, InBlockAdapterConfig(), 0, np.float64)
    assert np.array_equal(backbone_forward(img, p, ad).data, backbone_forward(img, p).data)


def test_inblock_rank_bounds():
    assert InBlockAdapterConfig().rank(32) == 8
    with pytest.raises(ConfigError):
        InBlockAdapterConfig(bottleneck=40).rank(32)


def test_digest_is_fnv1a():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert BackboneConfig().digest() == BackboneConfig().digest()
    assert BackboneConfig(depth=5).digest() != BackboneConfig().digest()


def test_trainable_parameter_sets():
    dec, cad, inb = small_model("decoder"), small_model("cad"), small_model("inblock")
    d, c, i = (set(m.trainable_parameters()) for m in (dec, cad, inb))
    assert d < c and d < i
    assert not any(k.startswith("backbone.") for k in c | i)
    assert len(c) - len(d) == len(cad.adapter.named_parameters())
    assert sum(t.size for t in cad.trainable_parameters().values()) == sum(
        t.size for t in dec.trainable_parameters().values()
    ) + cad.adapter.num_trainable()
    assert len(small_model("inblock", 4).trainable_parameters()) - len(i) == 2 * 4


@pytest.mark.parametrize("mode", ["decoder", "cad", "inblock"])
def test_training_never_touches_the_trunk(mode):
    m = small_model(mode)
    before = {k: t.data.copy() for k, t in m.backbone.named.items()}
    opt = AdamW(list(m.trainable_parameters().values()))
    rng = np.random.default_rng(3)
    for _ in range(3):
        imgs = rng.uniform(size=(2, 3, 16, 16)).astype(np.float32)
        target = (rng.uniform(size=(2, 1, 16, 16)) < 0.3).astype(np.float32)
        opt.zero_grad()
        backward(seg_loss(m.forward(imgs, train=True), target))
        opt.step()
    for k, t in m.backbone.named.items():
        assert np.array_equal(t.data, before[k]), k
        assert t.grad is None


def test_cache_layout_and_roundtrip(tmp_path):
    samples = gen_dataset("camo", 200, 16, 3)
    manifest = precompute_embeddings(samples, SMALL, tmp_path)
    root = cache_root(tmp_path, SMALL)
    assert len(list(root.glob("*.cadt"))) == 200 and (root / "manifest.json").exists()
    assert manifest["sample_count"] == 200 and manifest["config_hash"] == SMALL.digest()
    assert {"backbone", "created"} <= set(json.loads((root / "manifest.json").read_text()))
    cached = load_cached_embeddings(samples[:5], SMALL, tmp_path)
    fresh = embed_images(np.stack([s.image for s in samples[:5]]), init_backbone(SMALL))
    assert np.array_equal(cached, fresh)
    assert np.all(np.abs(cached) < 1)


def test_cache_is_incremental(tmp_path):
    samples = gen_dataset("camo", 6, 16, 4)
    precompute_embeddings(samples[:3], SMALL, tmp_path)
    m = precompute_embeddings(samples[3:], SMALL, tmp_path)
    assert m["sample_count"] == 6
    load_cached_embeddings(samples, SMALL, tmp_path)


def test_stale_cache_detected(tmp_path):
    samples = gen_dataset("camo", 2, 16, 5)
    precompute_embeddings(samples, SMALL, tmp_path)
    other = BackboneConfig(patch=8, embed_dim=8, depth=3)
    with pytest.raises(StaleCacheError):
        load_cached_embeddings(samples, other, tmp_path)
    mpath = cache_root(tmp_path, SMALL) / "manifest.json"
    m = json.loads(mpath.read_text())
    m["config_hash"] = "0" * 16
    mpath.write_text(json.dumps(m))
    with pytest.raises(StaleCacheError):
        load_cached_embeddings(samples, SMALL, tmp_path)
    with pytest.raises(StaleCacheError):
        load_cached_embeddings(gen_dataset("camo", 1, 16, 99), SMALL, tmp_path)


def test_inblock_cannot_cache(tmp_path):
    with pytest.raises(StaleCacheError):
        precompute_embeddings(gen_dataset("camo", 1, 16, 0), SMALL, tmp_path, inblock=True)
