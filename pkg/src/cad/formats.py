"""Binary file formats: PPM/PGM images and the CADT tensor container.

CADT record layout (all little-endian)::

    b"CADT" | u16 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank | u64 dims[rank] | payload

A checkpoint bundles several named records::

    b"CADK" | u64 index_len | JSON index | records...

where the index is ``{"tensors": [{"name", "offset", "nbytes"}, ...], "meta": {...}}``
and offsets count from the first byte after the index.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from cad.errors import FormatError

CADT_MAGIC = b"CADT"
CADT_VERSION = 1
CKPT_MAGIC = b"CADK"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


# ---------------------------------------------------------------- PPM / PGM


def _parse_pnm_header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    """Return (width, height, payload offset) of a binary PNM file."""
    if buf[:2] != magic:
        shown = buf[:2].decode("latin-1", "replace")
        raise FormatError(f"bad magic {shown!r} at byte 0, expected {magic.decode()!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"malformed header at byte {start}")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"missing whitespace after maxval at byte {pos}")
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported (only 255), header ends at byte {pos}")
    if width < 1 or height < 1:
        raise FormatError(f"non-positive dimensions {width}x{height}")
    return width, height, pos + 1


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, off = _parse_pnm_header(buf, magic)
    need = width * height * channels
    have = len(buf) - off
    if have < need:
        raise FormatError(f"truncated payload at byte {off}: expected {need} bytes, got {have}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)


def read_ppm(path) -> np.ndarray:
    """P6 file -> uint8 array (3, H, W)."""
    buf = Path(path).read_bytes()
    width, height, _ = _parse_pnm_header(buf, b"P6")
    flat = _read_pnm(path, b"P6", 3)
    return flat.reshape(height, width, 3).transpose(2, 0, 1).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = _as_uint8(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise FormatError(f"PPM expects (3, H, W), got {rgb.shape}")
    _, h, w = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.transpose(1, 2, 0).tobytes())


def read_pgm(path, binarize: bool = False) -> np.ndarray:
    """P5 file -> uint8 array (H, W); ``binarize`` maps values >= 128 to 1, else 0."""
    buf = Path(path).read_bytes()
    width, height, _ = _parse_pnm_header(buf, b"P5")
    gray = _read_pnm(path, b"P5", 1).reshape(height, width).copy()
    if binarize:
        return (gray >= 128).astype(np.uint8)
    return gray


def write_pgm(path, gray: np.ndarray) -> None:
    gray = _as_uint8(gray)
    if gray.ndim != 2:
        raise FormatError(f"PGM expects (H, W), got {gray.shape}")
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_mask(path) -> np.ndarray:
    return read_pgm(path, binarize=True)


def _as_uint8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return np.ascontiguousarray(arr)
    if arr.dtype.kind == "f":
        return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.min() < 0 or arr.max() > 255:
        raise FormatError("integer image values must lie in [0, 255]")
    return arr.astype(np.uint8)


def to_unit_float(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------- CADT


def cadt_header(dtype, dims) -> bytes:
    code = _CODES.get(np.dtype(dtype))
    if code is None:
        raise FormatError(f"CADT stores float32/float64 only, got {np.dtype(dtype)}")
    return CADT_MAGIC + struct.pack("<HBB", CADT_VERSION, code, len(dims)) + struct.pack(
        f"<{len(dims)}Q", *dims
    )


def encode_cadt(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    head = cadt_header(arr.dtype, arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()


def decode_cadt(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, end offset)."""
    if len(buf) - offset < 8:
        raise FormatError(f"truncated CADT header at byte {offset}")
    if buf[offset : offset + 4] != CADT_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r} at byte {offset}")
    version, code, rank = struct.unpack_from("<HBB", buf, offset + 4)
    if version != CADT_VERSION:
        raise FormatError(f"unsupported CADT version {version} at byte {offset + 4}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code} at byte {offset + 6}")
    pos = offset + 8
    if len(buf) - pos < 8 * rank:
        raise FormatError(f"truncated dims at byte {pos}")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = _DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank else 0
    have = len(buf) - pos
    if have < need:
        raise FormatError(f"truncated CADT payload at byte {pos}: expected {need} bytes, got {have}")
    arr = np.frombuffer(buf, dtype=dt, count=need // dt.itemsize, offset=pos).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + need


def write_cadt(path, arr: np.ndarray) -> None:
    _atomic_write(path, encode_cadt(arr))


def read_cadt(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_cadt(buf)
    if end != len(buf):
        raise FormatError(f"payload length mismatch: {len(buf) - end} trailing bytes after byte {end}")
    return arr


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    records, index, offset = [], [], 0
    for name, arr in tensors.items():
        rec = encode_cadt(arr)
        index.append({"name": name, "offset": offset, "nbytes": len(rec)})
        records.append(rec)
        offset += len(rec)
    head = json.dumps({"tensors": index, "meta": meta or {}}, sort_keys=True).encode()
    _atomic_write(path, CKPT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(records))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at byte 0, expected b'CADK'")
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header")
    (hlen,) = struct.unpack_from("<Q", buf, 4)
    try:
        head = json.loads(buf[12 : 12 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad checkpoint index at byte 12: {exc}") from None
    base = 12 + hlen
    out = {}
    for entry in head["tensors"]:
        arr, end = decode_cadt(buf, base + entry["offset"])
        if end - (base + entry["offset"]) != entry["nbytes"]:
            raise FormatError(f"record {entry['name']!r} length disagrees with index")
        out[entry["name"]] = arr
    return out, head.get("meta", {})


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
