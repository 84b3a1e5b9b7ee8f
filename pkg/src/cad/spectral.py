"""2D discrete Fourier transforms and high-frequency component extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cad.errors import ConfigError, ShapeError
from cad.tensor import Tensor


@dataclass
class ComplexPlane:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        if self.re.shape != self.im.shape or self.re.ndim != 2:
            raise ShapeError(f"ComplexPlane needs matching 2D parts, got {self.re.shape} / {self.im.shape}")

    @property
    def dims(self) -> tuple[int, int]:
        return self.re.shape

    @classmethod
    def from_complex(cls, z: np.ndarray) -> ComplexPlane:
        return cls(np.ascontiguousarray(z.real, dtype=np.float64), np.ascontiguousarray(z.imag, dtype=np.float64))

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im


@dataclass(frozen=True)
class HfcConfig:
    """``tau`` is the side fraction of the centered low-frequency block zeroed out."""

    tau: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"hfc.tau must lie in [0, 1), got {self.tau}")


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    """Recursive radix-2 Cooley-Tukey along the last axis."""
    n = x.shape[-1]
    if n == 1:
        return x
    even = _fft_pow2(x[..., ::2])
    odd = _fft_pow2(x[..., 1::2])
    tw = np.exp(-2j * np.pi * np.arange(n // 2) / n) * odd
    return np.concatenate([even + tw, even - tw], axis=-1)


def _dft_direct(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    k = np.arange(n)
    return x @ np.exp(-2j * np.pi * np.outer(k, k) / n)


def dft1(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward DFT along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    return _fft_pow2(x) if _is_pow2(x.shape[-1]) else _dft_direct(x)


def _dft2_stack(z: np.ndarray) -> np.ndarray:
    """Forward 2D DFT over the last two axes of a complex stack."""
    return np.swapaxes(dft1(np.swapaxes(dft1(z), -1, -2)), -1, -2)


def _idft2_stack(z: np.ndarray) -> np.ndarray:
    h, w = z.shape[-2:]
    return np.conj(_dft2_stack(np.conj(z))) / (h * w)


def dft2(image: np.ndarray) -> ComplexPlane:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"dft2 expects a 2D plane, got {image.shape}")
    return ComplexPlane.from_complex(_dft2_stack(image.astype(np.complex128)))


def idft2(plane: ComplexPlane) -> tuple[np.ndarray, float]:
    """Inverse transform scaled by 1/(H*W); returns (real part, max |imag|)."""
    z = _idft2_stack(plane.to_complex())
    return np.ascontiguousarray(z.real), float(np.max(np.abs(z.imag)))


def fftshift(plane: ComplexPlane) -> ComplexPlane:
    h, w = plane.dims
    shift = (h // 2, w // 2)
    return ComplexPlane(np.roll(plane.re, shift, axis=(0, 1)), np.roll(plane.im, shift, axis=(0, 1)))


def ifftshift(plane: ComplexPlane) -> ComplexPlane:
    h, w = plane.dims
    shift = (-(h // 2), -(w // 2))
    return ComplexPlane(np.roll(plane.re, shift, axis=(0, 1)), np.roll(plane.im, shift, axis=(0, 1)))


def center_mask(h: int, w: int, tau: float) -> np.ndarray:
    """True on the bins the zero mask removes, in shifted (DC-centered) coordinates."""
    u = np.abs(np.arange(h) - h // 2)[:, None]
    v = np.abs(np.arange(w) - w // 2)[None, :]
    return (u <= int(np.floor(tau * h / 2))) & (v <= int(np.floor(tau * w / 2)))


def _hfc_stack(planes: np.ndarray, tau: float) -> np.ndarray:
    """extract_hfc over the last two axes of a real stack, all planes at once."""
    h, w = planes.shape[-2:]
    shift = (h // 2, w // 2)
    spec = np.roll(_dft2_stack(planes.astype(np.complex128)), shift, axis=(-2, -1))
    spec[..., center_mask(h, w, tau)] = 0
    spec = np.roll(spec, (-shift[0], -shift[1]), axis=(-2, -1))
    return np.ascontiguousarray(_idft2_stack(spec).real)


def extract_hfc(image: np.ndarray, cfg: HfcConfig | float = HfcConfig()) -> np.ndarray:
    """High-pass an (H, W) plane, or each (H, W) plane of a stack, in float64.

    Steps: forward DFT, shift DC to the center, zero the centered block from
    :func:`center_mask`, shift back, inverse DFT, keep the real part.
    """
    tau = cfg.tau if isinstance(cfg, HfcConfig) else HfcConfig(float(cfg)).tau
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 2:
        raise ShapeError(f"extract_hfc expects (..., H, W), got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("extract_hfc: non-finite input")
    return _hfc_stack(image, tau)


def build_adapter_input(image, cfg: HfcConfig = HfcConfig()) -> Tensor:
    """Concatenate RGB with its per-channel HFC into an (N, 6, H, W) constant tensor."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"build_adapter_input expects (N, 3, H, W), got {arr.shape}")
    hfc = extract_hfc(arr, cfg).astype(arr.dtype)
    return Tensor(np.concatenate([arr, hfc], axis=1), requires_grad=False)


def hfc_visual(hfc: np.ndarray) -> np.ndarray:
    """Per-channel min-max stretch of a (C, H, W) map to uint8."""
    lo = hfc.min(axis=(1, 2), keepdims=True)
    hi = hfc.max(axis=(1, 2), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.clip(np.rint((hfc - lo) / span * 255.0), 0, 255).astype(np.uint8)
