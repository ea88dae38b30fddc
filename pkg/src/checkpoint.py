"""
Binary checkpoint format.

All integers are little-endian u32; tensors are stored as little-endian f32
in row-major order:

    b"SVQA1"
    u32 format version
    u32 config length | UTF-8 JSON config echo
    u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 rank | rank × u32 dims | f32 payload

Tensors are written in the order given, so identical weights and configs
produce identical bytes.
"""

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError, MissingArtifactError

MAGIC = b"SVQA1"
FORMAT_VERSION = 1


def encode_checkpoint(config: dict[str, Any], tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    blob = json.dumps(config, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Parse checkpoint bytes into (config echo, tensors as float64)."""
    reader = _Reader(data, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: unknown magic, not an SVQA1 checkpoint")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    try:
        config = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: config echo is not valid UTF-8 JSON") from exc

    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(reader.take(4 * count), dtype="<f4")
        tensors[name] = payload.reshape(dims).astype(np.float64)
    if reader.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - reader.pos} trailing bytes")
    return config, tensors


def save_checkpoint(path: str | Path, config: dict[str, Any], tensors: dict[str, np.ndarray]) -> Path:
    """Write atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(config, tensors))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError("checkpoint", str(path))
    return decode_checkpoint(path.read_bytes(), str(path))
