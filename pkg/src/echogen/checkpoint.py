"""Versioned binary checkpoint container: JSON header + named fp32 blobs.

Layout (little-endian):

    magic "ECKP" | u32 version | u32 header_len | header JSON | blob data | sha256

Blobs are stored sorted by name as raw little-endian fp32; the header's
blob index records name/shape/offset.  The trailing sha256 digest covers
header and blob bytes, so any truncation or bit flip fails on load.
Nothing time-dependent goes into the file: identical state serializes to
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ECKP"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    header: dict
    blobs: dict = field(default_factory=dict)
    content_hash: str | None = None

    def blobs_with_prefix(self, prefix: str) -> dict:
        return {k: v for k, v in self.blobs.items() if k.startswith(prefix)}

    def strip_prefix(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.blobs.items() if k.startswith(prefix)}


def blob_section_hash(blobs: dict, prefix: str = "") -> str:
    """SHA-256 over the named fp32 payload of blobs matching prefix."""
    h = hashlib.sha256()
    for name in sorted(blobs):
        if not name.startswith(prefix):
            continue
        h.update(name.encode("utf-8"))
        arr = np.ascontiguousarray(blobs[name], dtype="<f4")
        h.update(arr.tobytes())
    return h.hexdigest()


def _serialize(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.blobs)
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate blob names")
    index = []
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(ckpt.blobs[name], dtype="<f4")
        index.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "<f4",
            "offset": len(payload),
            "nbytes": arr.nbytes,
        })
        payload += arr.tobytes()
    header = dict(ckpt.header)
    header["format_version"] = FORMAT_VERSION
    header["blob_index"] = index
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header_bytes)) + header_bytes + bytes(payload)
    digest = hashlib.sha256(body).digest()
    return body + digest


def checkpoint_hash(ckpt: Checkpoint) -> str:
    """Content hash over header+blobs (identical to the on-disk trailer)."""
    data = _serialize(ckpt)
    return hashlib.sha256(data[:-32]).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write the checkpoint; returns its content hash."""
    data = _serialize(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    ckpt.content_hash = hashlib.sha256(data[:-32]).hexdigest()
    return ckpt.content_hash


def load_checkpoint(path) -> Checkpoint:
    """Read and validate magic, version, hash trailer, and blob shapes."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32:
        raise CheckpointError(f"corrupt checkpoint {path}: file too short")
    body, digest = raw[:-32], raw[-32:]
    if body[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic")
    version, header_len = struct.unpack("<II", body[len(MAGIC): len(MAGIC) + 8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path}: format version {version} != supported {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"corrupt checkpoint {path}: hash mismatch")
    header_start = len(MAGIC) + 8
    try:
        header = json.loads(body[header_start: header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: unreadable header ({exc})") from exc
    payload = body[header_start + header_len:]
    blobs = {}
    for entry in header.pop("blob_index", []):
        nbytes = entry["nbytes"]
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) * 4 != nbytes:
            raise CheckpointError(f"corrupt checkpoint {path}: blob {entry['name']!r} shape/size disagree")
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"corrupt checkpoint {path}: blob {entry['name']!r} out of bounds")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
        blobs[entry["name"]] = arr.astype(np.float32)
    return Checkpoint(header=header, blobs=blobs, content_hash=hashlib.sha256(body).hexdigest())
