"""Digest-checked binary container shared by checkpoints and dictionaries.

Layout::

    magic | u64 manifest length | UTF-8 JSON manifest | f32 LE payloads | SHA-256

The manifest lists every tensor as ``{"name", "dims", "offset", "nbytes"}``
with offsets relative to the start of the payload block.  The digest covers
every byte before it.
"""

import hashlib
import json
import struct

import numpy as np

from .errors import LoadError

_F32 = np.dtype("<f4")


def pack(magic: bytes, manifest: dict, tensors) -> bytes:
    """Serialize ``tensors`` (an iterable of ``(name, array)``) behind ``manifest``."""
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        entries.append({"name": name, "dims": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = dict(manifest, tensors=entries)
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = magic + struct.pack("<Q", len(head)) + head + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def unpack(magic: bytes, data: bytes, source="<bytes>"):
    """Inverse of :func:`pack`.  Returns ``(manifest, {name: float32 array})``."""
    if len(data) < len(magic) + 8 + 32:
        raise LoadError(f"{source}: truncated file ({len(data)} bytes)")
    if data[:len(magic)] != magic:
        raise LoadError(f"{source}: bad magic {data[:len(magic)]!r}, expected {magic!r}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise LoadError(f"{source}: SHA-256 digest mismatch (file corrupted)")
    (hlen,) = struct.unpack_from("<Q", body, len(magic))
    start = len(magic) + 8
    if start + hlen > len(body):
        raise LoadError(f"{source}: manifest length {hlen} overruns file")
    try:
        manifest = json.loads(body[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{source}: unreadable manifest: {exc}") from None
    payload = memoryview(body)[start + hlen:]
    tensors = {}
    for e in manifest.get("tensors", []):
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(payload) or e["nbytes"] != 4 * int(np.prod(e["dims"], dtype=np.int64)):
            raise LoadError(f"{source}: tensor {e['name']!r} extent is inconsistent")
        arr = np.frombuffer(payload[lo:hi], dtype=_F32).reshape(e["dims"])
        tensors[e["name"]] = arr.astype(np.float32)
    return manifest, tensors


def digest_hex(data: bytes) -> str:
    """Identifier of a packed artifact: its trailing SHA-256, hex encoded."""
    return data[-32:].hex()
