"""Raster and label-mask file I/O.

CFT layout: ``b"CFT1"``, then ``height, width, channels`` as little-endian
uint32, then ``height * width * channels`` little-endian float32 values in
row-major, channel-minor order. Label masks are also accepted as 16-bit
grayscale PNG or binary PGM.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Raster, as_mask

MAGIC = b"CFT1"
_HEADER = struct.Struct("<4sIII")
MAX_ELEMENTS = 1 << 34
MAX_EXACT_FLOAT_ID = 1 << 24


class CFTError(ValueError):
    """Base class for malformed CFT files."""


class BadMagicError(CFTError):
    pass


class DimensionOverflowError(CFTError):
    pass


class TruncatedPayloadError(CFTError):
    pass


class MaskRangeError(ValueError):
    """Instance ids do not fit the requested mask encoding."""


def encode_cft(raster: Raster) -> bytes:
    if not isinstance(raster, Raster):
        raster = Raster(raster)
    header = _HEADER.pack(MAGIC, raster.height, raster.width, raster.channels)
    return header + raster.array.astype("<f4", copy=False).tobytes(order="C")


def decode_cft(buf: bytes) -> Raster:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("file ends inside the header")
    _, h, w, c = _HEADER.unpack_from(buf)
    if h == 0 or w == 0 or c == 0:
        raise DimensionOverflowError(f"zero dimension in header ({h}, {w}, {c})")
    n = h * w * c
    if n > MAX_ELEMENTS:
        raise DimensionOverflowError(f"{h}x{w}x{c} exceeds {MAX_ELEMENTS} elements")
    payload = len(buf) - _HEADER.size
    if payload < 4 * n:
        raise TruncatedPayloadError(f"payload has {payload} bytes, expected {4 * n}")
    if payload > 4 * n:
        raise CFTError(f"{payload - 4 * n} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size)
    return Raster(data.reshape(h, w, c))


def write_raster(raster, path) -> None:
    Path(path).write_bytes(encode_cft(raster))


def read_raster(path) -> Raster:
    return decode_cft(Path(path).read_bytes())


def _suffix(path) -> str:
    return os.path.splitext(str(path))[1].lower()


def write_pgm(mask, path) -> None:
    mask = as_mask(mask)
    if mask.size and mask.max() > 65535:
        raise MaskRangeError("PGM masks hold ids < 65536")
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n65535\n" % (w, h))
        f.write(mask.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    # magic, width, height, maxval; '#' comments allowed between fields
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(x) for x in fields[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)


def write_mask(mask, path) -> None:
    """Write a label mask as CFT, 16-bit PNG or PGM depending on the suffix."""
    mask = as_mask(mask)
    ext = _suffix(path)
    top = int(mask.max()) if mask.size else 0
    if ext == ".png":
        if top > 65535:
            raise MaskRangeError(f"max id {top} does not fit a 16-bit PNG")
        Image.fromarray(mask.astype(np.uint16)).save(path)
    elif ext == ".pgm":
        write_pgm(mask, path)
    else:
        if top > MAX_EXACT_FLOAT_ID:
            raise MaskRangeError(f"max id {top} is not exactly representable in float32")
        write_raster(Raster(mask.astype(np.float32)), path)


def read_mask(path) -> np.ndarray:
    ext = _suffix(path)
    if ext == ".pgm":
        return as_mask(read_pgm(path))
    if ext in (".png", ".tif", ".tiff"):
        with Image.open(path) as im:
            return as_mask(np.array(im))
    r = read_raster(path)
    if r.channels != 1:
        raise ValueError(f"{path}: label mask must have 1 channel, got {r.channels}")
    return as_mask(r.array[:, :, 0])


def read_image(path) -> np.ndarray:
    """Read an image as ``(H, W, C)`` float32 (CFT, PNG or PGM)."""
    ext = _suffix(path)
    if ext == ".pgm":
        arr = read_pgm(path)
    elif ext in (".png", ".tif", ".tiff", ".jpg", ".jpeg"):
        with Image.open(path) as im:
            arr = np.array(im)
    else:
        return np.array(read_raster(path).array)
    arr = arr.astype(np.float32)
    return arr[:, :, None] if arr.ndim == 2 else arr


def write_image(image, path) -> None:
    write_raster(Raster(image), path)
