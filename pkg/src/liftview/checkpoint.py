"""Flat binary checkpoint container for named float64 tensors.

Layout (all little-endian):

    magic   4 bytes  b"LRTN"
    version u32      currently 1
    count   u32      number of tensors
    then per tensor, in ascending name order:
       name_len u32, name utf-8 bytes, rank u32, dims u64 * rank,
       payload float64 * prod(dims), C order

Writing sorts by name, so identical state always produces identical bytes.
"""

from __future__ import annotations

import struct
from collections.abc import Mapping

import numpy as np

MAGIC = b"LRTN"
VERSION = 1
_MAX_RANK = 16


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def save_tensors(path, tensors: Mapping[str, object]) -> None:
    """Write named arrays (or Tensors) to `path` in the container format."""
    items = []
    for name in sorted(tensors):
        arr = tensors[name]
        data = getattr(arr, "data", arr)
        a = np.asarray(data, dtype=np.float64)
        if not a.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            a = np.ascontiguousarray(a)
        items.append((name, a))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container written by save_tensors; strict validation throughout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of tensor {i}"))
        try:
            name = take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path}: tensor {i} name is not utf-8") from e
        (rank,) = struct.unpack("<I", take(4, f"rank of {name!r}"))
        if rank > _MAX_RANK:
            raise CheckpointError(f"{path}: {name!r} has implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of {name!r}"))
        n_elem = 1
        for d in dims:
            n_elem *= d
        payload = take(8 * n_elem, f"payload of {name!r}")
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims)
        out[name] = arr.astype(np.float64, copy=True)
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out
