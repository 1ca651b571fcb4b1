"""Checksum and canonical-serialization helpers.

Artifact provenance is tracked by content hash, so every writer in the
package funnels through these functions. JSON is always serialized with
sorted keys; hashes would otherwise depend on dict construction order.
"""

import hashlib
import json


def stable_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            chunk = f.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def sha256_tensors(named_tensors) -> str:
    """Hash an iterable of (name, torch.Tensor) pairs, order-sensitively."""
    h = hashlib.sha256()
    for name, t in named_tensors:
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def mapping_hash(mapping: dict) -> str:
    """Hash a flat {key: jsonable} mapping as sorted key=value lines."""
    lines = [f"{k}={stable_json(v)}" for k, v in sorted(mapping.items())]
    return sha256_bytes("\n".join(lines).encode())
