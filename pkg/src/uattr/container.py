"""Binary container: 8-byte magic, u64 header length, UTF-8 JSON header, f32 LE payload."""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"UATTRCKP"
FISHER_MAGIC = b"UATTRFSH"
IMAGES_MAGIC = b"UATTRIMG"


class ContainerError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_container(magic: bytes, header: dict, payload: np.ndarray) -> bytes:
    if len(magic) != 8:
        raise ContainerError("magic must be 8 bytes")
    data = np.ascontiguousarray(payload, dtype="<f4").reshape(-1)
    header = dict(header, payload_count=int(data.size))
    hb = canonical_json(header)
    return magic + struct.pack("<Q", len(hb)) + hb + data.tobytes()


def decode_container(blob: bytes, magic: bytes) -> tuple[dict, np.ndarray]:
    if blob[:8] != magic:
        raise ContainerError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    if len(blob) < 16:
        raise ContainerError("truncated header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise ContainerError("truncated header")
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    body = blob[16 + hlen :]
    count = header.get("payload_count")
    if count is None or len(body) != 4 * count:
        raise ContainerError(f"payload has {len(body)} bytes, header declares {count} f32 values")
    return header, np.frombuffer(body, dtype="<f4").astype(np.float32)


def write_container(path, magic: bytes, header: dict, payload: np.ndarray) -> str:
    """Write atomically; returns the SHA-256 of the file bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_container(magic, header, payload)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def read_container(path, magic: bytes) -> tuple[dict, np.ndarray]:
    return decode_container(Path(path).read_bytes(), magic)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def array_sha256(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()
