"""Binary container for named float tensors (SDTF files).

Layout, all integers little-endian:

    magic   4 bytes  b"SDTF"
    version u16      currently 1
    count   u16      number of tensors
    per tensor:
        name_len u16, name UTF-8 bytes
        rank     u8
        dims     rank x u32
        dtype    u8   (0 = float32, 1 = float64)
        payload  row-major little-endian values

Round trips are bit-exact for both dtypes.  Readers are strict: bad magic,
truncated payloads, duplicate names or trailing bytes all raise
:class:`TensorFileError`.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"SDTF"
VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFileError(ValueError):
    """Raised for malformed headers, size mismatches or truncated payloads."""


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write a name->array mapping to ``path``.

    Arrays must be float32 or float64; other dtypes are rejected rather than
    silently cast so round trips stay bit-exact.
    """
    if not tensors:
        raise TensorFileError("refusing to write a file with zero tensors")
    names = list(tensors)
    if len(set(names)) != len(names):
        raise TensorFileError("duplicate tensor names")

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<HH", VERSION, len(names))
    for name in names:
        arr = np.asarray(tensors[name])
        if arr.dtype not in _DTYPE_TAGS:
            raise TensorFileError(
                f"tensor {name!r} has dtype {arr.dtype}, expected float32 or float64"
            )
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise TensorFileError(f"tensor name too long: {name[:32]!r}...")
        if arr.ndim > 0xFF:
            raise TensorFileError(f"tensor {name!r} rank {arr.ndim} exceeds format limit")
        blob += struct.pack("<H", len(raw)) + raw
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            if d > 0xFFFFFFFF:
                raise TensorFileError(f"tensor {name!r} dimension {d} exceeds u32")
            blob += struct.pack("<I", d)
        blob += struct.pack("<B", _DTYPE_TAGS[arr.dtype])
        blob += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TensorFileError(
                f"truncated file: needed {n} bytes for {what}, "
                f"have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_tensors(path) -> Dict[str, np.ndarray]:
    """Read an SDTF file back into a name->array dict."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise TensorFileError(f"file too short for header ({len(data)} bytes)")
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise TensorFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u16("version")
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    count = r.u16("tensor count")

    out: Dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u16("name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TensorFileError(f"tensor {i}: name is not valid UTF-8") from exc
        if name in out:
            raise TensorFileError(f"duplicate tensor name {name!r}")
        rank = r.u8(f"{name!r} rank")
        dims = tuple(r.u32(f"{name!r} dim {k}") for k in range(rank))
        tag = r.u8(f"{name!r} dtype")
        if tag not in _TAG_DTYPES:
            raise TensorFileError(f"tensor {name!r}: unknown dtype tag {tag}")
        dtype = _TAG_DTYPES[tag]
        n_items = 1
        for d in dims:
            n_items *= d
        payload = r.take(n_items * dtype.itemsize, f"{name!r} payload")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if r.pos != len(data):
        raise TensorFileError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return out
