"""Block-keyed binary container for trainable tensors.

Layout (all integers little-endian)::

    b"TAPBLK01" | u32 entry count | entries...
    entry := u16 len | block id | u16 len | param name | u8 ndim | u32 dims... | f64 payload

Uploads to the server use the same encoding, so byte counts are measured on the
real payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .model import BlockPartition, ParamStore

MAGIC = b"TAPBLK01"


class CheckpointError(ValueError):
    pass


def encode_entries(entries: Iterable[tuple[str, str, np.ndarray]]) -> bytes:
    entries = list(entries)
    out = [MAGIC, struct.pack("<I", len(entries))]
    for block, name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        b, n = block.encode(), name.encode()
        out.append(struct.pack("<H", len(b)) + b + struct.pack("<H", len(n)) + n)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_entries(data: bytes) -> Iterator[tuple[str, str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a block checkpoint")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    for _ in range(count):
        (lb,) = struct.unpack_from("<H", data, pos)
        block = data[pos + 2: pos + 2 + lb].decode()
        pos += 2 + lb
        (ln,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2: pos + 2 + ln].decode()
        pos += 2 + ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + size > len(data):
            raise CheckpointError(f"truncated payload for {name}")
        arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape)
        pos += size
        yield block, name, arr.astype(np.float64)
    if pos != len(data):
        raise CheckpointError("trailing bytes after last entry")


def encode_blocks(store: ParamStore, partition: BlockPartition, blocks: Iterable[str]) -> bytes:
    entries = []
    for b in sorted(blocks):
        for name in partition.blocks[b]:
            entries.append((b, name, store.trainable[name]))
    return encode_entries(entries)


def save_checkpoint(path: str | Path, store: ParamStore, partition: BlockPartition,
                    blocks: Iterable[str] | None = None) -> int:
    blocks = partition.blocks if blocks is None else blocks
    data = encode_blocks(store, partition, blocks)
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    """``{block id: {param name: tensor}}``."""
    out: dict[str, dict[str, np.ndarray]] = {}
    for block, name, arr in decode_entries(Path(path).read_bytes()):
        out.setdefault(block, {})[name] = arr
    return out
