"""
Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic        8 bytes   b"ADAFCKPT"
    version      u32       FORMAT_VERSION
    meta_len     u32       length of the UTF-8 JSON metadata block
    metadata     meta_len bytes
    count        u32       number of entries
    entries      count x { u16 name_len, name (UTF-8 path), u8 ndim,
                           ndim x u32 dims, prod(dims) x float64 payload }
    trailer      32 bytes  SHA-256 of every preceding byte

Paths are dotted parameter/buffer names such as "layers.0.conv.weight",
"layers.3.unit1.bank.S" or "gate.lstm.bias_f".
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np

from adafilter_errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"ADAFCKPT"
FORMAT_VERSION = 1
_DIGEST_SIZE = 32


@dataclass
class Checkpoint:
    """Parameter/buffer arrays by path, plus free-form metadata."""
    tensors: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def __getitem__(self, path: str) -> np.ndarray:
        try:
            return self.tensors[path]
        except KeyError:
            raise CheckpointError(f"Checkpoint has no entry '{path}'") from None

    def content_hash(self) -> str:
        return tensors_hash(self.tensors)


def tensors_hash(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over sorted paths, shapes and float64 payloads."""
    digest = hashlib.sha256()
    for path in sorted(tensors):
        array = np.ascontiguousarray(tensors[path], dtype="<f8")
        digest.update(path.encode())
        digest.update(str(array.shape).encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


def encode_checkpoint(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> bytes:
    meta_bytes = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for path in sorted(tensors):
        array = np.ascontiguousarray(tensors[path], dtype="<f8")
        name = path.encode("utf-8")
        if len(name) > 0xFFFF:
            raise CheckpointError(f"Parameter path too long: {path[:60]}...")
        if array.ndim > 0xFF:
            raise CheckpointError(f"Too many dimensions for {path}: {array.ndim}")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < len(MAGIC) + 12 + _DIGEST_SIZE or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source} is not an AdaFilter checkpoint (bad magic or truncated)")
    body, trailer = blob[:-_DIGEST_SIZE], blob[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError(f"{source} failed its integrity check (SHA-256 mismatch)")

    offset = len(MAGIC)

    def take(fmt: str) -> tuple:
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(body):
            raise CheckpointError(f"{source} is truncated at byte {offset}")
        values = struct.unpack_from(fmt, body, offset)
        offset += size
        return values

    version, meta_len = take("<II")
    if version > FORMAT_VERSION:
        raise CheckpointError(f"{source} has format version {version}; this build reads up to {FORMAT_VERSION}")
    metadata = json.loads(body[offset:offset + meta_len].decode("utf-8")) if meta_len else {}
    offset += meta_len
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n_bytes > len(body):
            raise CheckpointError(f"{source}: payload for '{name}' is truncated")
        tensors[name] = np.frombuffer(body, dtype="<f8", count=n_bytes // 8, offset=offset).reshape(shape).copy()
        offset += n_bytes
    if offset != len(body):
        raise CheckpointError(f"{source} has {len(body) - offset} unexpected trailing bytes")
    return Checkpoint(tensors=tensors, metadata=metadata, version=version)


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray],
                    metadata: Mapping[str, Any] | None = None) -> Path:
    """Write tensors (converted to float64) and metadata atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors, metadata))
    tmp.replace(path)
    logger.debug(f"Saved checkpoint with {len(tensors)} entries to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), source=str(path))
