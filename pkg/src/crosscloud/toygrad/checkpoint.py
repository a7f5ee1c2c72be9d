"""Checkpoint files.

Layout: ``b"NBLC"`` | version u8 | topology length u32 | topology (UTF-8 JSON)
| tensor count u32 | per tensor: name length u16, name, ndim u8, dims u32 each,
float64 values.  Integers and values are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

MAGIC = b"NBLC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], topology: Mapping) -> None:
    topo = json.dumps(topology, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<BI", VERSION, len(topo)), topo, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        key = name.encode()
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, expect_topology: Optional[Mapping] = None):
    """Return (tensors, topology); reject files whose topology differs from ``expect_topology``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    version, tlen = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 9
    topology = json.loads(data[off : off + tlen])
    off += tlen
    if expect_topology is not None and topology != json.loads(json.dumps(expect_topology)):
        raise CheckpointError(f"checkpoint topology {topology} does not match {dict(expect_topology)}")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + klen].decode()
        off += klen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return tensors, topology
