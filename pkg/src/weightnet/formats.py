"""Binary and text file formats.

* ``WNK1`` generated-kernel dumps: magic, five little-endian u32 extents
  (B, C_out, C_in, kh, kw), then float32 little-endian data, row-major.
* ``WNCK`` checkpoints: magic, u32 version, then records until EOF. Each
  record is u32 name length + UTF-8 name, u32 rank + u32 extents, float32 data.
* IDX (MNIST) image/label files: big-endian header, any standard element type.
* Binary PGM (``P5``) grayscale images.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .dynamic import GeneratedKernel

WNK_MAGIC = b"WNK1"
CKPT_MAGIC = b"WNCK"
CKPT_VERSION = 1

IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class FormatError(ValueError):
    """A file does not match the expected layout."""


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


# WNK1 -------------------------------------------------------------------------


def write_wnk(path: str | os.PathLike, kernel: GeneratedKernel | np.ndarray) -> None:
    data = kernel.data if isinstance(kernel, GeneratedKernel) else np.asarray(kernel)
    if data.ndim != 5:
        raise FormatError(f"WNK1 needs a 5-d kernel, got shape {data.shape}")
    with open(path, "wb") as fh:
        fh.write(WNK_MAGIC)
        fh.write(struct.pack("<5I", *data.shape))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_wnk(path: str | os.PathLike) -> GeneratedKernel:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != WNK_MAGIC:
            raise FormatError(f"{path}: not a WNK1 kernel dump")
        shape = struct.unpack("<5I", _read_exact(fh, 20, "extents"))
        n = int(np.prod(shape))
        data = np.frombuffer(_read_exact(fh, 4 * n, "kernel data"), dtype="<f4").reshape(shape)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after kernel data")
    return GeneratedKernel(data.astype(np.float32), source=str(path))


# WNCK -------------------------------------------------------------------------


def write_checkpoint(path: str | os.PathLike, state: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, arr in state.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    state: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CKPT_MAGIC:
            raise FormatError(f"{path}: not a WNCK checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError(f"{path}: truncated record header")
            (nlen,) = struct.unpack("<I", head)
            name = _read_exact(fh, nlen, "record name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape"))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * n, f"data of {name}"), dtype="<f4")
            state[name] = data.reshape(shape).astype(np.float32)
    return state


# IDX --------------------------------------------------------------------------


def read_idx(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "IDX magic")
        if magic[0] != 0 or magic[1] != 0 or magic[2] not in IDX_TYPES:
            raise FormatError(f"{path}: bad IDX magic {magic.hex()}")
        dtype, ndim = IDX_TYPES[magic[2]], magic[3]
        shape = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, "IDX extents"))
        n = int(np.prod(shape))
        data = np.frombuffer(_read_exact(fh, n * dtype.itemsize, "IDX data"), dtype=dtype)
    return data.reshape(shape)


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code, dtype = 0x08, np.dtype("u1")
    else:
        matches = [k for k, v in IDX_TYPES.items() if v.kind == array.dtype.kind and v.itemsize == array.dtype.itemsize]
        if not matches:
            raise FormatError(f"no IDX type code for dtype {array.dtype}")
        code, dtype = matches[0], IDX_TYPES[matches[0]]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def idx_shape(path: str | os.PathLike) -> tuple[int, ...]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "IDX magic")
        return struct.unpack(f">{magic[3]}I", _read_exact(fh, 4 * magic[3], "IDX extents"))


# PGM --------------------------------------------------------------------------


def write_pgm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise FormatError(f"PGM needs a 2-d uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    try:
        Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write heatmap {path}: {exc.strerror or exc}") from exc


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    body = raw[-w * h:]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
