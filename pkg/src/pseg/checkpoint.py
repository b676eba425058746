"""Binary tensor-table checkpoints.

Layout (all integers little-endian)::

    b"PSEG" | u32 version | u64 iteration | u32 tensor count
    per tensor: u32 name length | utf-8 name | u32 rank | u64 dims[rank] | f64 payload (C order)

Tensors are written in sorted name order so equal contents give equal bytes.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PSEG"
VERSION = 1


def encode(tensors, iteration=0):
    out = [MAGIC, struct.pack("<IQI", VERSION, int(iteration), len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode(blob, source="checkpoint"):
    """Returns (tensors, iteration)."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"{source}: truncated at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError(f"{source}: bad magic")
    version, iteration, count = struct.unpack("<IQI", take(16))
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(n)).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: tensor name is not utf-8") from None
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(bytes(take(8 * size)), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise FormatError(f"{source}: {len(view) - pos} trailing bytes")
    return tensors, iteration


def save(path, tensors, iteration=0):
    path = Path(path)
    path.write_bytes(encode(tensors, iteration))
    return path


def load(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return decode(blob, str(path))
