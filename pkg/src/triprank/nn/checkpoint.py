"""Binary checkpoint container.

Layout (little-endian)::

    b"TRIPRANK1\\n"
    u32 len, schema hash (ascii)
    u32 len, config as "key=value" lines (utf-8)
    u32 tensor count
    per tensor: u32 name len, name, u32 rank, rank x u64 dims, float64 values
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import SchemaError, SchemaMismatch

MAGIC = b"TRIPRANK1\n"


def _pack_bytes(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def save_checkpoint(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], config: Mapping[str, str], schema_hash: str) -> None:
    """Write atomically: a partial file never replaces an existing checkpoint."""
    parts = [MAGIC, _pack_bytes(schema_hash.encode("ascii"))]
    text = "".join(f"{k}={v}\n" for k, v in sorted(config.items()))
    parts.append(_pack_bytes(text.encode("utf-8")))
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        parts.append(_pack_bytes(name.encode("utf-8")))
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(b"".join(parts))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SchemaError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def load_checkpoint(path: str | os.PathLike, expected_hash: str | None = None):
    """Return (schema hash, config dict, arrays dict).

    Raises SchemaMismatch when ``expected_hash`` is given and differs.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise SchemaError(f"{path}: not a TRIPRANK1 checkpoint")
    schema_hash = r.blob().decode("ascii")
    if expected_hash is not None and schema_hash != expected_hash:
        raise SchemaMismatch(f"checkpoint schema {schema_hash[:12]} does not match data schema {expected_hash[:12]}")
    config = {}
    for line in r.blob().decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        config[k] = v
    arrays = {}
    for _ in range(r.u32()):
        name = r.blob().decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
    return schema_hash, config, arrays
