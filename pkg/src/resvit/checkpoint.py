"""Binary checkpoint bundle ("RVCK") and architecture fingerprints.

Layout, all integers little-endian::

    b"RVCK" | u32 version=1 | u32 count
    count x ( u16 name_len | name utf-8 | u8 dtype (0=f32) | u8 ndim
              | u32 dims[ndim] | f32 payload )
    u32 phase | u64 fingerprint
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .errors import DataError

MAGIC = b"RVCK"
VERSION = 1
DTYPE_F32 = 0

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def config_fingerprint(config) -> int:
    """64-bit FNV-1a of the canonical JSON serialisation of a ModelConfig."""
    d = config.to_dict() if hasattr(config, "to_dict") else dict(config)
    text = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return fnv1a_64(text.encode("utf-8"))


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    phase: int = 1
    fingerprint: int = 0
    epoch: int = 0

    def names(self):
        return list(self.tensors)

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}


def write_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(struct.pack("<IQ", ckpt.phase, ckpt.fingerprint))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        tensors = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            dtype, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            if dtype != DTYPE_F32:
                raise DataError(f"{path}: tensor {name!r} has unknown dtype tag {dtype}")
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if off + size > len(buf):
                raise DataError(f"{path}: truncated payload for {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size // 4,
                                          offset=off).reshape(dims).astype(np.float32)
            off += size
        phase, fingerprint = struct.unpack_from("<IQ", buf, off)
        off += 12
    except struct.error:
        raise DataError(f"{path}: truncated checkpoint") from None
    if off != len(buf):
        raise DataError(f"{path}: {len(buf) - off} trailing bytes after checkpoint")
    return Checkpoint(tensors, phase, fingerprint)
