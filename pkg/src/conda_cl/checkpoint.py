"""Binary parameter files (``CFLW`` flows, ``CSEG`` segmenters).

Layout, little-endian: 4-byte magic, u32 version (1), a magic-specific
config record, u32 block count, then per block: u32 name length, UTF-8
name, u32 rank, rank x u32 extents, float64 payload.
"""

import struct

import numpy as np

from .errors import CorruptCheckpoint

VERSION = 1


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptCheckpoint("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def encode_blocks(params: dict) -> bytes:
    out = [struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_blocks(reader: _Reader) -> dict:
    (count,) = reader.unpack("<I")
    params = {}
    for _ in range(count):
        (n,) = reader.unpack("<I")
        try:
            name = reader.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpoint("bad parameter name") from None
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64)
        params[name] = data.reshape(shape)
    if reader.pos != len(reader.buf):
        raise CorruptCheckpoint("trailing bytes after parameter blocks")
    return params


def save_params(path, magic: bytes, header: bytes, params: dict):
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<I", VERSION) + header + encode_blocks(params))


def open_params(path, magic: bytes) -> _Reader:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != magic:
        raise CorruptCheckpoint(f"{path}: bad magic, expected {magic!r}")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    return reader
