"""Assemble backbone, optional adapters, and decoder for one fine-tuning mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cad.adapter import AdapterConfig, AdapterParams, adapter_forward, apply_adapter, init_adapter
from cad.backbone import (
    BackboneConfig,
    BackboneParams,
    InBlockAdapterConfig,
    backbone_forward,
    embed_images,
    init_backbone,
    init_inblock_adapters,
)
from cad.errors import ConfigError
from cad.seg import DecoderConfig, decoder_forward, init_decoder
from cad.spectral import HfcConfig, build_adapter_input
from cad.tensor import Tensor

MODES = ("decoder", "cad", "inblock")
_MODE_ALIASES = {"decoder-only": "decoder", "decoder": "decoder", "cad": "cad", "inblock": "inblock"}


def normalize_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}") from None


@dataclass
class SegModel:
    mode: str
    backbone_cfg: BackboneConfig
    adapter_cfg: AdapterConfig
    decoder_cfg: DecoderConfig
    hfc_cfg: HfcConfig
    backbone: BackboneParams
    decoder: dict[str, Tensor]
    adapter: AdapterParams | None = None
    inblock: dict[str, Tensor] | None = None

    def trainable_parameters(self) -> dict[str, Tensor]:
        """Named trainable tensors; the backbone trunk never appears here."""
        named = dict(self.decoder)
        if self.adapter is not None:
            named.update(self.adapter.named_parameters())
        if self.inblock is not None:
            named.update(self.inblock)
        return {k: t for k, t in named.items() if t.requires_grad}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: t.data for k, t in self.decoder.items()}
        if self.adapter is not None:
            state.update(self.adapter.state_dict())
        if self.inblock is not None:
            state.update({k: t.data for k, t in self.inblock.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.decoder.items():
            t.data = np.array(state[k], dtype=t.dtype)
        if self.adapter is not None:
            self.adapter.load_state_dict(state)
        if self.inblock is not None:
            for k, t in self.inblock.items():
                t.data = np.array(state[k], dtype=t.dtype)

    def embed(self, images: np.ndarray) -> np.ndarray:
        """Frozen embeddings; only valid for modes without in-block adapters."""
        return embed_images(images, self.backbone)

    def forward(
        self,
        images: np.ndarray,
        train: bool,
        embeddings: np.ndarray | None = None,
        adapter_inputs: np.ndarray | None = None,
    ) -> Tensor:
        """Logits for a batch. ``embeddings`` skips the encoder when it is frozen."""
        if self.mode == "inblock":
            emb = backbone_forward(Tensor(images), self.backbone, self.inblock)
        else:
            emb = Tensor(embeddings if embeddings is not None else self.embed(images))
        if self.mode == "cad":
            inp = Tensor(adapter_inputs) if adapter_inputs is not None else build_adapter_input(images, self.hfc_cfg)
            emb = apply_adapter(emb, adapter_forward(inp, self.adapter, self.adapter_cfg, train))
        return decoder_forward(emb, self.decoder, self.decoder_cfg)


def build_model(
    mode: str,
    backbone_cfg: BackboneConfig,
    adapter_cfg: AdapterConfig,
    decoder_cfg: DecoderConfig,
    hfc_cfg: HfcConfig = HfcConfig(),
    seed: int = 0,
    inblock_cfg: InBlockAdapterConfig = InBlockAdapterConfig(),
    dtype=np.float32,
    backbone: BackboneParams | None = None,
) -> SegModel:
    """Seeded model; the decoder init is shared across modes for a given seed.

    ``backbone`` reuses already-built frozen weights (they depend only on
    ``backbone_cfg``), which the memory model uses to skip re-initialization.
    """
    mode = normalize_mode(mode)
    model = SegModel(
        mode=mode,
        backbone_cfg=backbone_cfg,
        adapter_cfg=adapter_cfg,
        decoder_cfg=decoder_cfg,
        hfc_cfg=hfc_cfg,
        backbone=backbone if backbone is not None else init_backbone(backbone_cfg, dtype),
        decoder=init_decoder(decoder_cfg, backbone_cfg.embed_dim, seed, dtype),
    )
    if mode == "cad":
        model.adapter = init_adapter(adapter_cfg, seed + 1, dtype)
    elif mode == "inblock":
        model.inblock = init_inblock_adapters(backbone_cfg, inblock_cfg, seed + 2, dtype)
    return model
