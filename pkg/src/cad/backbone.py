"""Frozen toy image encoder, in-block adapters, and the embedding cache.

The encoder is a patch embedding followed by residual pointwise MLP blocks and
a final tanh, so embeddings sit in (-1, 1). Its weights are seeded and never
trained. In-block adapters add a trainable bottleneck branch inside every
block; that placement forces backprop through the whole trunk, which is what
the parallel adapter avoids.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from cad import ops
from cad.data import Rng, SampleRecord
from cad.errors import ConfigError, ShapeError, StaleCacheError
from cad.formats import read_cadt, write_cadt
from cad.tensor import Tensor, parameter

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
BACKBONE_GAIN = 0.5


@dataclass(frozen=True)
class BackboneConfig:
    patch: int = 8
    embed_dim: int = 32
    depth: int = 4
    hidden_mult: int = 2
    seed: int = 7

    def __post_init__(self):
        if min(self.patch, self.embed_dim, self.hidden_mult) < 1 or self.depth < 0:
            raise ConfigError(f"invalid backbone config {self}")

    def embed_hw(self, h: int, w: int) -> tuple[int, int]:
        if h % self.patch or w % self.patch:
            raise ShapeError(f"image {(h, w)} not divisible by patch {self.patch}")
        return h // self.patch, w // self.patch

    def digest(self) -> str:
        """FNV-1a 64 over the canonical JSON of the config, as 16 hex digits."""
        return f"{fnv1a64(json.dumps(asdict(self), sort_keys=True).encode()):016x}"


@dataclass(frozen=True)
class InBlockAdapterConfig:
    bottleneck: int | None = None  # defaults to embed_dim // 4

    def rank(self, embed_dim: int) -> int:
        r = self.bottleneck if self.bottleneck is not None else max(1, embed_dim // 4)
        if not 1 <= r <= embed_dim:
            raise ConfigError(f"in-block bottleneck {r} must lie in [1, {embed_dim}]")
        return r


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class BackboneParams:
    cfg: BackboneConfig
    named: dict[str, Tensor]

    def block(self, i: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        p = f"backbone.block{i}."
        return self.named[p + "w1"], self.named[p + "b1"], self.named[p + "w2"], self.named[p + "b2"]


def init_backbone(cfg: BackboneConfig, dtype=np.float32) -> BackboneParams:
    rng = Rng(cfg.seed)
    d, hid, p = cfg.embed_dim, cfg.embed_dim * cfg.hidden_mult, cfg.patch
    named = {
        "backbone.patch.weight": ops.he_uniform(rng, (d, 3, p, p), 3 * p * p, BACKBONE_GAIN, dtype),
        "backbone.patch.bias": np.zeros(d, dtype),
    }
    for i in range(cfg.depth):
        named[f"backbone.block{i}.w1"] = ops.he_uniform(rng, (hid, d, 1, 1), d, BACKBONE_GAIN, dtype)
        named[f"backbone.block{i}.b1"] = np.zeros(hid, dtype)
        named[f"backbone.block{i}.w2"] = ops.he_uniform(rng, (d, hid, 1, 1), hid, BACKBONE_GAIN, dtype)
        named[f"backbone.block{i}.b2"] = np.zeros(d, dtype)
    return BackboneParams(cfg, {k: parameter(v, k, trainable=False) for k, v in named.items()})


def init_inblock_adapters(bcfg: BackboneConfig, acfg: InBlockAdapterConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """One down/up bottleneck per block; up-projections start at zero."""
    rng = Rng(seed)
    d = bcfg.embed_dim
    r = acfg.rank(d)
    named = {}
    for i in range(bcfg.depth):
        named[f"inblock{i}.down.weight"] = ops.he_uniform(rng, (r, d, 1, 1), d, dtype=dtype)
        named[f"inblock{i}.down.bias"] = np.zeros(r, dtype)
        named[f"inblock{i}.up.weight"] = np.zeros((d, r, 1, 1), dtype)
        named[f"inblock{i}.up.bias"] = np.zeros(d, dtype)
    return {k: parameter(v, k) for k, v in named.items()}


def backbone_forward(
    image: Tensor,
    params: BackboneParams,
    adapters: dict[str, Tensor] | None = None,
    slope: float = ops.LEAKY_SLOPE,
) -> Tensor:
    """(N, 3, H, W) -> (N, D, H/p, W/p) embeddings in (-1, 1)."""
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"backbone expects (N, 3, H, W), got {image.shape}")
    cfg = params.cfg
    cfg.embed_hw(*image.shape[2:])
    n = params.named
    x = ops.patch_conv(image, n["backbone.patch.weight"], n["backbone.patch.bias"])
    for i in range(cfg.depth):
        w1, b1, w2, b2 = params.block(i)
        branch = ops.pointwise_conv(ops.leaky_relu(ops.pointwise_conv(x, w1, b1), slope), w2, b2)
        y = ops.add(x, branch)
        if adapters is not None:
            a = f"inblock{i}."
            side = ops.pointwise_conv(x, adapters[a + "down.weight"], adapters[a + "down.bias"])
            side = ops.pointwise_conv(ops.leaky_relu(side, slope), adapters[a + "up.weight"], adapters[a + "up.bias"])
            y = ops.add(y, side)
        x = y
    return ops.tanh(x)


def embed_images(images: np.ndarray, params: BackboneParams) -> np.ndarray:
    """Frozen embeddings computed one image at a time.

    Per-image evaluation keeps each embedding independent of batch size, so
    cached and freshly computed embeddings agree bit for bit.
    """
    outs = [backbone_forward(Tensor(img[None]), params).data for img in images]
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------- cache


def cache_root(cache_dir, cfg: BackboneConfig) -> Path:
    return Path(cache_dir) / cfg.digest()


def precompute_embeddings(
    samples: Sequence[SampleRecord],
    cfg: BackboneConfig,
    cache_dir,
    inblock: bool = False,
) -> dict:
    """Write one CADT embedding per sample plus a manifest; returns the manifest."""
    if inblock:
        raise StaleCacheError("in-block adapters change the encoder output during training; embeddings cannot be cached")
    root = cache_root(cache_dir, cfg)
    root.mkdir(parents=True, exist_ok=True)
    params = init_backbone(cfg)
    ids = []
    for s in samples:
        path = root / f"{s.id}.cadt"
        if not path.exists():
            write_cadt(path, embed_images(s.image[None], params)[0])
        s.embedding_ref = str(path)
        ids.append(s.id)
    mpath = root / "manifest.json"
    known = set()
    if mpath.exists():
        prev = json.loads(mpath.read_text())
        if prev.get("config_hash") == cfg.digest() and prev.get("backbone") == asdict(cfg):
            known = set(prev.get("samples", []))
    known.update(ids)
    manifest = {
        "backbone": asdict(cfg),
        "config_hash": cfg.digest(),
        "sample_count": len(known),
        "samples": sorted(known),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_cached_embeddings(samples: Sequence[SampleRecord], cfg: BackboneConfig, cache_dir) -> np.ndarray:
    """Stack cached embeddings for ``samples``; raises StaleCacheError on any mismatch."""
    root = cache_root(cache_dir, cfg)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise StaleCacheError(f"no embedding cache for backbone {cfg.digest()} under {cache_dir}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("config_hash") != cfg.digest() or manifest.get("backbone") != asdict(cfg):
        raise StaleCacheError(f"cache manifest at {mpath} was built for a different backbone config")
    known = set(manifest.get("samples", []))
    out = []
    for s in samples:
        if s.id not in known or not (root / f"{s.id}.cadt").exists():
            raise StaleCacheError(f"sample {s.id} missing from cache {root}")
        out.append(read_cadt(root / f"{s.id}.cadt"))
    return np.stack(out)
