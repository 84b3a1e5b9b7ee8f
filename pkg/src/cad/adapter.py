"""The parallel convolutional adapter.

It reads the image plus its high-frequency channels, shrinks them to the
embedding grid through three conv blocks, and returns a bounded delta that is
added to the frozen image embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cad import ops
from cad.data import Rng
from cad.errors import ConfigError, ShapeError
from cad.ops import BatchNormState, ConvBlockParams
from cad.tensor import Tensor, parameter

IN_CHANNELS = 6


@dataclass(frozen=True)
class AdapterConfig:
    embed_dim: int = 32
    embed_h: int = 8
    embed_w: int = 8
    block_channels: tuple[int, int, int] = (32, 32, 32)
    scale: float = 0.1
    lrelu_slope: float = ops.LEAKY_SLOPE

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if len(self.block_channels) != 3 or min(self.block_channels) < 1:
            raise ConfigError(f"adapter.block_channels must be 3 positive widths, got {self.block_channels}")
        if min(self.embed_dim, self.embed_h, self.embed_w) < 1:
            raise ConfigError("adapter embedding extents must be positive")
        if not 0.0 < self.lrelu_slope < 1.0:
            raise ConfigError(f"adapter.lrelu_slope must lie in (0, 1), got {self.lrelu_slope}")
        if self.scale <= 0:
            raise ConfigError(f"adapter.scale must be positive, got {self.scale}")

    def check_input(self, h: int, w: int) -> None:
        if h % 8 or w % 8:
            raise ShapeError(f"adapter input {(h, w)} must be divisible by 8")
        if h // 8 < self.embed_h or w // 8 < self.embed_w:
            raise ShapeError(
                f"adapter input {(h, w)} too small for embedding {(self.embed_h, self.embed_w)} after three halvings"
            )


@dataclass
class AdapterParams:
    pw_in_weight: Tensor
    pw_in_bias: Tensor
    blocks: list[ConvBlockParams]
    pw_out_weight: Tensor
    pw_out_bias: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"adapter.pw_in.weight": self.pw_in_weight, "adapter.pw_in.bias": self.pw_in_bias}
        for i, blk in enumerate(self.blocks):
            named[f"adapter.block{i}.conv.weight"] = blk.weight
            named[f"adapter.block{i}.conv.bias"] = blk.bias
            named[f"adapter.block{i}.bn.gamma"] = blk.gamma
            named[f"adapter.block{i}.bn.beta"] = blk.beta
        named["adapter.pw_out.weight"] = self.pw_out_weight
        named["adapter.pw_out.bias"] = self.pw_out_bias
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out[f"adapter.block{i}.bn.running_mean"] = blk.bn.running_mean
            out[f"adapter.block{i}.bn.running_var"] = blk.bn.running_var
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: t.data for k, t in self.named_parameters().items()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.named_parameters().items():
            t.data = np.array(state[k], dtype=t.dtype)
        for k, buf in self.buffers().items():
            buf[...] = state[k]

    def num_trainable(self) -> int:
        return sum(t.size for t in self.parameters() if t.requires_grad)


def init_adapter(cfg: AdapterConfig, seed: int, dtype=np.float32) -> AdapterParams:
    """He-uniform convs, zero biases, unit BN, and a zero output layer.

    The zero output layer makes a fresh adapter emit an exact zero delta.
    """
    rng = Rng(seed)
    c0, c1, c2 = cfg.block_channels
    pw_in_w = ops.he_uniform(rng, (c0, IN_CHANNELS, 1, 1), IN_CHANNELS, dtype=dtype)
    blocks = []
    for cin, cout in ((c0, c1), (c1, c2), (c2, c2)):
        w = ops.he_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype=dtype)
        blocks.append(
            ConvBlockParams(
                weight=parameter(w, "w"),
                bias=parameter(np.zeros(cout, dtype), "b"),
                gamma=parameter(np.ones(cout, dtype), "gamma"),
                beta=parameter(np.zeros(cout, dtype), "beta"),
                bn=BatchNormState.fresh(cout, dtype),
            )
        )
    params = AdapterParams(
        pw_in_weight=parameter(pw_in_w, "w"),
        pw_in_bias=parameter(np.zeros(c0, dtype), "b"),
        blocks=blocks,
        pw_out_weight=parameter(np.zeros((cfg.embed_dim, c2, 1, 1), dtype), "w"),
        pw_out_bias=parameter(np.zeros(cfg.embed_dim, dtype), "b"),
    )
    for name, t in params.named_parameters().items():
        t.name = name
    return params


def channel_minmax_normalize(x) -> Tensor:
    """Rescale every (sample, channel) plane to [0, 1]; constant planes become 0."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    lo = arr.min(axis=(2, 3), keepdims=True)
    hi = arr.max(axis=(2, 3), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1)
    out = np.where(span > 0, (arr - lo) / safe, 0).astype(arr.dtype)
    return Tensor(out)


def adapter_forward(inp: Tensor, params: AdapterParams, cfg: AdapterConfig, train: bool) -> Tensor:
    """(N, 6, H, W) image+HFC stack -> (N, D, embed_h, embed_w) delta in [-scale, scale]."""
    if inp.data.ndim != 4 or inp.shape[1] != IN_CHANNELS:
        raise ShapeError(f"adapter input must be (N, {IN_CHANNELS}, H, W), got {inp.shape}")
    cfg.check_input(*inp.shape[2:])
    x = channel_minmax_normalize(inp)
    x = ops.pointwise_conv(x, params.pw_in_weight, params.pw_in_bias)
    for blk in params.blocks:
        x = ops.conv_block(x, blk, cfg.lrelu_slope, train)
    x = ops.adaptive_avgpool(x, cfg.embed_h, cfg.embed_w)
    x = ops.pointwise_conv(x, params.pw_out_weight, params.pw_out_bias)
    return ops.scale(ops.tanh(x), cfg.scale)


def apply_adapter(embedding: Tensor, delta: Tensor) -> Tensor:
    if embedding.shape != delta.shape:
        raise ShapeError(f"embedding {embedding.shape} and adapter delta {delta.shape} differ")
    return ops.add(embedding, delta)


def count_adapter_params(cfg: AdapterConfig) -> int:
    """Closed-form trainable count, layer by layer."""
    c0, c1, c2 = cfg.block_channels
    total = IN_CHANNELS * c0 + c0
    for cin, cout in ((c0, c1), (c1, c2), (c2, c2)):
        total += cin * cout * 9 + cout + 2 * cout
    return total + c2 * cfg.embed_dim + cfg.embed_dim
