"""Netpbm image I/O (P6/P5/P4) and the binary perturbation record."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

RECORD_MAGIC = b"ADVLADLT"
RECORD_VERSION = 1


def to_uint8(x) -> np.ndarray:
    """[0, 1] reals -> 8-bit samples, rounding half to even."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.rint(x * 255.0).astype(np.uint8)


def _read_header(raw: bytes, n_fields: int):
    # magic plus n_fields integers, '#' comments allowed, single whitespace before data
    tokens, pos = [], 0
    token_re = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
    for _ in range(n_fields + 1):
        m = token_re.match(raw, pos)
        if not m:
            raise ValueError("truncated netpbm header")
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ValueError("malformed netpbm header")
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """Load a binary P6 file with maxval 255 as a uint8 array [H, W, 3]."""
    raw = Path(path).read_bytes()
    tokens, off = _read_header(raw, 3)
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = raw[off:off + w * h * 3]
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def load_image(path) -> np.ndarray:
    """P6 file -> float image [3, H, W] in [0, 1]."""
    return read_ppm(path).transpose(2, 0, 1).astype(np.float64) / 255.0


def save_image(path, image: np.ndarray) -> None:
    """Float image [3, H, W] -> P6 file."""
    write_ppm(path, to_uint8(np.asarray(image).transpose(1, 2, 0)))


def write_pgm(path, values: np.ndarray, normalize: bool = True) -> None:
    """Grayscale P5. With ``normalize`` the map is scaled so its max becomes 255."""
    v = np.asarray(values, dtype=np.float64)
    if normalize and v.max() > 0:
        v = v / v.max()
    g = to_uint8(v)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(g.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, off = _read_header(raw, 3)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, _ = (int(t) for t in tokens[1:])
    return np.frombuffer(raw[off:off + w * h], dtype=np.uint8).reshape(h, w).copy()


def write_pbm(path, bits: np.ndarray) -> None:
    """Bitmap P4; 1 (black) marks a selected pixel."""
    b = np.asarray(bits).astype(bool)
    h, w = b.shape
    with open(path, "wb") as fh:
        fh.write(b"P4\n%d %d\n" % (w, h))
        fh.write(np.packbits(b, axis=1).tobytes())


def read_pbm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, off = _read_header(raw, 2)
    if tokens[0] != b"P4":
        raise ValueError(f"{path}: not a binary PBM (P4) file")
    w, h = (int(t) for t in tokens[1:])
    row = (w + 7) // 8
    packed = np.frombuffer(raw[off:off + row * h], dtype=np.uint8).reshape(h, row)
    return np.unpackbits(packed, axis=1)[:, :w].astype(bool)


# ---------------------------------------------------------------------------
# perturbation record
#
# magic(8) | u32 version | u32 array count | per array:
#   u16 name length, name (utf-8), u32 ndim, u32 dims..., f64 little-endian data


def write_record(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(RECORD_MAGIC)
        fh.write(struct.pack("<II", RECORD_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)) + key)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(arr.tobytes())


def read_record(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != RECORD_MAGIC:
        raise ValueError(f"{path}: not a perturbation record")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != RECORD_VERSION:
        raise ValueError(f"{path}: unsupported record version {version}")
    off, out = 16, {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + klen].decode("utf-8")
        off += klen
        (ndim,) = struct.unpack_from("<I", raw, off)
        shape = struct.unpack_from(f"<{ndim}I", raw, off + 4)
        off += 4 + 4 * ndim
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    return out
