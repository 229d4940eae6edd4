"""PGS1 checkpoint container.

Layout (all integers little-endian)::

    b"PGS1" | version u32 | count u32 |
    per array: name_len u32 | name utf-8 | rank u32 | dims u64 * rank | float64 data

Metadata is stored as the reserved array ``__meta__``: the UTF-8 bytes of a
sorted-key JSON document, one float64 per byte.
"""
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from utils.errors import DataIntegrityError

MAGIC = b"PGS1"
VERSION = 1
META_KEY = "__meta__"


def encode_checkpoint(arrays: Dict[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None) -> bytes:
    entries = dict(arrays)
    if metadata is not None:
        raw = json.dumps(metadata, sort_keys=True).encode("utf-8")
        entries[META_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)

    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, array in entries.items():
        array = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_checkpoint(payload: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if payload[:4] != MAGIC:
        raise DataIntegrityError("not a PGS1 checkpoint (bad magic bytes)")
    try:
        version, count = struct.unpack_from("<II", payload, 4)
        if version != VERSION:
            raise DataIntegrityError(f"unsupported PGS1 version {version}")
        offset = 12
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", payload, offset)
            offset += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            arrays[name] = data.astype(np.float64).reshape(dims)
    except (struct.error, ValueError) as e:
        raise DataIntegrityError(f"truncated or corrupt PGS1 checkpoint: {e}")
    if offset != len(payload):
        raise DataIntegrityError(f"PGS1 checkpoint has {len(payload) - offset} trailing bytes")

    metadata: Dict[str, Any] = {}
    if META_KEY in arrays:
        raw = arrays.pop(META_KEY).astype(np.uint8).tobytes()
        metadata = json.loads(raw.decode("utf-8"))
    return arrays, metadata


def save_checkpoint(
    path: Union[str, Path], arrays: Dict[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(arrays, metadata))
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    return decode_checkpoint(Path(path).read_bytes())
