"""Deterministic randomness, synthetic segmentation samples, and resizing."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from cad.errors import ConfigError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64_mix(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


class Rng:
    """splitmix64 generator; block draws are vectorized over the counter."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return splitmix64_mix(self.state)

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z

    def uniform(self, n: int | None = None, lo: float = 0.0, hi: float = 1.0):
        """Doubles in [lo, hi) from the top 53 bits; a float when ``n`` is None."""
        if n is None:
            return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0**-53)
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * u

    def integer(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi]."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(0, i)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)


def stream_seed(seed: int, index: int) -> int:
    """Seed of the per-sample stream: one splitmix64 step from seed XOR index."""
    return Rng((int(seed) ^ int(index)) & MASK64).next_u64()


@dataclass
class SampleRecord:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str
    embedding_ref: str | None = None


def content_hash(image: np.ndarray, mask: np.ndarray | None = None) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(image, dtype=np.float32).tobytes())
    if mask is not None:
        h.update(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    return h.hexdigest()[:16]


# Generator knobs. Grating frequencies are in cycles per image side.
FREQ_RANGE = (6.0, 10.0)
NOISE_AMPLITUDE = 0.15
SHADOW_RANGE = (0.3, 0.6)
FG_FRACTION_RANGE = (0.05, 0.5)
CAMO_MAX_MEAN_GAP = 0.1
CAMO_TINT = (0.04, 0.07)
CAMO_TINT_SIGN = np.array([1.0, -1.0, -1.0])


def _ellipse(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    while True:
        cy, cx = rng.uniform(None, 0.25, 0.75) * size, rng.uniform(None, 0.25, 0.75) * size
        ay, ax = rng.uniform(None, 0.12, 0.4) * size, rng.uniform(None, 0.12, 0.4) * size
        rot = rng.uniform(None, 0.0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(rot) + dy * math.sin(rot)
        v = -dx * math.sin(rot) + dy * math.cos(rot)
        mask = ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0).astype(np.uint8)
        frac = mask.mean()
        if FG_FRACTION_RANGE[0] <= frac <= FG_FRACTION_RANGE[1]:
            return mask


def _gratings(rng: Rng, size: int, k: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    out = []
    for _ in range(k):
        theta = rng.uniform(None, 0.0, math.pi)
        freq = rng.uniform(None, *FREQ_RANGE)
        phase = rng.uniform(None, 0.0, 2 * math.pi)
        color = rng.uniform(3, 0.3, 1.0)
        arg = 2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta))
        out.append((arg, phase, color))
    return out


def _render(gratings, shifts, inside: np.ndarray) -> np.ndarray:
    size = inside.shape[0]
    img = np.zeros((3, size, size))
    for (arg, phase, color), shift in zip(gratings, shifts):
        wave = np.sin(arg + phase + shift * inside)
        img += color[:, None, None] * wave[None]
    return img


def gen_sample(kind: str, size: int, seed: int, index: int) -> SampleRecord:
    rng = Rng(stream_seed(seed, index))
    while True:
        mask = _ellipse(rng, size)
        gratings = _gratings(rng, size, rng.integer(2, 3))
        if kind == "camo":
            shifts = [rng.uniform(None, 0.5 * math.pi, 1.5 * math.pi) for _ in gratings]
        else:
            shifts = [0.0] * len(gratings)
        img = _render(gratings, shifts, mask.astype(np.float64))
        img += rng.uniform(img.size, -NOISE_AMPLITUDE, NOISE_AMPLITUDE).reshape(img.shape) * len(gratings)
        img = (img - img.min()) / (img.max() - img.min())
        if kind == "camo":
            # weak per-channel colour cast on the object, kept inside [0, 1]
            hi = CAMO_TINT[1]
            tint = rng.uniform(3, *CAMO_TINT) * CAMO_TINT_SIGN
            img = img * (1 - 2 * hi) + hi + tint[:, None, None] * mask[None]
        if kind == "shadow":
            img = img * np.where(mask, rng.uniform(None, *SHADOW_RANGE), 1.0)[None]
            break
        if camo_mean_gap(img, mask) < CAMO_MAX_MEAN_GAP:
            break
    image = img.astype(np.float32)
    return SampleRecord(image=image, mask=mask, id=content_hash(image, mask))


def camo_mean_gap(image: np.ndarray, mask: np.ndarray) -> float:
    """Largest per-channel |mean inside - mean outside| of the mask."""
    fg = mask.astype(bool)
    return float(np.max(np.abs(image[:, fg].mean(axis=1) - image[:, ~fg].mean(axis=1))))


def gen_dataset(kind: str, n: int, size: int, seed: int, patch: int = 8, start: int = 0) -> list[SampleRecord]:
    """Samples ``start .. start+n-1`` of a camouflage or shadow scene, pure in its arguments.

    Every sample draws from its own stream, so sample ``i`` does not depend on
    ``n`` or on generation order. Train and test splits are disjoint index
    ranges of the same seed.
    """
    if kind not in ("camo", "shadow"):
        raise ConfigError(f"data.kind must be 'camo' or 'shadow', got {kind!r}")
    if n < 1:
        raise ConfigError(f"data.n must be >= 1, got {n}")
    if size < 8 or size % 8 or size % patch:
        raise ConfigError(f"data.size {size} must be divisible by 8 and by the patch size {patch}")
    return [gen_sample(kind, size, seed, i) for i in range(start, start + n)]


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of the other label."""
    m = mask.astype(bool)
    edge = np.zeros_like(m)
    edge[:-1] |= m[:-1] != m[1:]
    edge[1:] |= m[:-1] != m[1:]
    edge[:, :-1] |= m[:, :-1] != m[:, 1:]
    edge[:, 1:] |= m[:, :-1] != m[:, 1:]
    return edge


def gradient_energy(image: np.ndarray) -> np.ndarray:
    """Squared forward-difference magnitude summed over channels, (H, W)."""
    gy = np.zeros(image.shape[1:])
    gx = np.zeros(image.shape[1:])
    gy[:-1] = (np.diff(image, axis=1) ** 2).sum(axis=0)
    gx[:, :-1] = (np.diff(image, axis=2) ** 2).sum(axis=0)
    return gy + gx


def _bilinear_axis(n_in: int, n_out: int):
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) or (H, W) with half-pixel centers (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be positive, got {(out_h, out_w)}")
    img = np.asarray(image, dtype=np.float64)
    y0, y1, fy = _bilinear_axis(img.shape[-2], out_h)
    x0, x1, fx = _bilinear_axis(img.shape[-1], out_w)
    rows = img[..., y0, :] * (1 - fy)[:, None] + img[..., y1, :] * fy[:, None]
    out = rows[..., x0] * (1 - fx) + rows[..., x1] * fx
    return out.astype(np.asarray(image).dtype if np.asarray(image).dtype.kind == "f" else np.float64)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be positive, got {(out_h, out_w)}")
    h, w = mask.shape[-2:]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[..., ys[:, None], xs[None, :]]
