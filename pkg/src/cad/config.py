"""Run configuration: one JSON document covering data, model, optimizer, and paths."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from cad.adapter import AdapterConfig
from cad.backbone import BackboneConfig
from cad.errors import CadError, ConfigError
from cad.model import MODES, normalize_mode
from cad.seg import AdamWHyper, DecoderConfig
from cad.spectral import HfcConfig


@dataclass
class DataSection:
    kind: str = "camo"
    n_train: int = 200
    n_test: int = 50
    size: int = 64
    seed: int = 2024


@dataclass
class HfcSection:
    tau: float = 0.25


@dataclass
class BackboneSection:
    patch: int = 8
    embed_dim: int = 32
    depth: int = 4
    hidden_mult: int = 2
    seed: int = 7


@dataclass
class AdapterSection:
    block_channels: list[int] = field(default_factory=lambda: [32, 32, 32])
    scale: float = 0.1
    lrelu_slope: float = 0.01


@dataclass
class DecoderSection:
    channels: list[int] = field(default_factory=lambda: [32, 16, 8])
    stages: int | None = None


@dataclass
class OptimSection:
    lr: float = 1e-3
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    weight_decay: float = 1e-2


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    mode: str = "cad"


@dataclass
class PathsSection:
    cache_dir: str = "cache"
    out_dir: str = "runs/latest"
    data_dir: str = "data"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    hfc: HfcSection = field(default_factory=HfcSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- typed views used by the rest of the package

    def hfc_cfg(self) -> HfcConfig:
        return HfcConfig(self.hfc.tau)

    def backbone_cfg(self) -> BackboneConfig:
        b = self.backbone
        return BackboneConfig(b.patch, b.embed_dim, b.depth, b.hidden_mult, b.seed)

    def embed_hw(self) -> tuple[int, int]:
        return self.backbone_cfg().embed_hw(self.data.size, self.data.size)

    def adapter_cfg(self) -> AdapterConfig:
        h, w = self.embed_hw()
        a = self.adapter
        return AdapterConfig(self.backbone.embed_dim, h, w, tuple(a.block_channels), a.scale, a.lrelu_slope)

    def decoder_cfg(self) -> DecoderConfig:
        return DecoderConfig(tuple(self.decoder.channels), self.adapter.lrelu_slope)

    def optim_hyper(self) -> AdamWHyper:
        o = self.optim
        return AdamWHyper(o.lr, tuple(o.betas), o.eps, o.weight_decay)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> RunConfig:
        """Check every cross-module shape rule up front; errors name the key."""
        d = self.data
        _require(d.kind in ("camo", "shadow"), "data.kind", f"must be 'camo' or 'shadow', got {d.kind!r}")
        for key in ("n_train", "n_test", "size"):
            _require(getattr(d, key) >= 1, f"data.{key}", "must be >= 1")
        _require(d.size % 8 == 0, "data.size", f"{d.size} must be divisible by 8")
        _require(0.0 <= self.hfc.tau < 1.0, "hfc.tau", f"must lie in [0, 1), got {self.hfc.tau}")
        b = self.backbone
        for key in ("patch", "embed_dim", "hidden_mult"):
            _require(getattr(b, key) >= 1, f"backbone.{key}", "must be >= 1")
        _require(b.depth >= 0, "backbone.depth", "must be >= 0")
        _require(d.size % b.patch == 0, "backbone.patch", f"data.size {d.size} not divisible by patch {b.patch}")
        eh = d.size // b.patch
        _require(
            d.size // 8 >= eh,
            "backbone.patch",
            f"embedding {eh}x{eh} larger than the adapter's {d.size // 8}x{d.size // 8} after three halvings",
        )
        a = self.adapter
        _require(len(a.block_channels) == 3 and min(a.block_channels) >= 1, "adapter.block_channels", "need 3 positive widths")
        _require(a.scale > 0, "adapter.scale", "must be positive")
        _require(0 < a.lrelu_slope < 1, "adapter.lrelu_slope", "must lie in (0, 1)")
        dec = self.decoder
        _require(len(dec.channels) >= 1 and min(dec.channels) >= 1, "decoder.channels", "need positive widths")
        if dec.stages is not None:
            _require(dec.stages == len(dec.channels), "decoder.stages", "must equal len(decoder.channels)")
        _require(
            eh * 2 ** len(dec.channels) == d.size,
            "decoder.channels",
            f"{len(dec.channels)} upsampling stages take {eh} to {eh * 2 ** len(dec.channels)}, not {d.size}",
        )
        o = self.optim
        _require(o.lr > 0, "optim.lr", "must be positive")
        _require(len(o.betas) == 2 and all(0 <= x < 1 for x in o.betas), "optim.betas", "need two values in [0, 1)")
        _require(o.eps > 0, "optim.eps", "must be positive")
        _require(o.weight_decay >= 0, "optim.weight_decay", "must be >= 0")
        t = self.train
        _require(t.epochs >= 0, "train.epochs", "must be >= 0")
        _require(t.batch_size >= 1, "train.batch_size", "must be >= 1")
        try:
            t.mode = normalize_mode(t.mode)
        except CadError:
            raise ConfigError(f"train.mode: must be one of {MODES}, got {t.mode!r}") from None
        return self


def _require(ok: bool, key: str, why: str) -> None:
    if not ok:
        raise ConfigError(f"{key}: {why}")


def _build(cls, payload: Any, prefix: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{prefix}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        if key not in names:
            raise ConfigError(f"{prefix}.{key}: unknown key" if prefix else f"{key}: unknown section")
        sub = names[key].default_factory if names[key].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(sub):
            kwargs[key] = _build(sub, value, key)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(payload: dict) -> RunConfig:
    return _build(RunConfig, payload, "").validate()


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read ``path`` (or defaults), apply ``section.key`` overrides, and validate."""
    payload: dict = {}
    if path is not None:
        try:
            payload = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        payload.setdefault(section, {})[key] = value
    return from_dict(payload)


def parse_override(text: str) -> tuple[str, Any]:
    """``train.epochs=5`` -> ("train.epochs", 5); values parse as JSON when possible."""
    key, sep, raw = text.partition("=")
    if not sep or "." not in key:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw
