"""Checkpoints: a JSON manifest next to a raw little-endian payload.

The manifest records name, shape, dtype and byte offset for every tensor
(trainable parameters and running-statistic buffers), the resolved config
echo, and the branch merge order. The payload is the concatenation of the
raw buffers; its SHA-256 is stored in the manifest and verified on load, so
a truncated or corrupted payload fails before anything is consumed.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


class ChecksumError(IOError):
    pass


def _le_dtype(dtype):
    return np.dtype(dtype).newbyteorder("<")


def save_checkpoint(path, params, buffers, config_echo=None, merge_order=None):
    """Write `path` (manifest) and `path`.bin (payload)."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for kind, table in (("param", params), ("buffer", buffers)):
        for name in sorted(table):
            arr = table[name].data if kind == "param" else table[name]
            raw = np.ascontiguousarray(arr, dtype=_le_dtype(arr.dtype)).tobytes()
            entries.append({
                "name": name,
                "kind": kind,
                "shape": list(arr.shape),
                "dtype": str(np.dtype(arr.dtype)),
                "offset": offset,
                "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
    payload = b"".join(blobs)
    manifest = {
        "format": 1,
        "payload": path.name + ".bin",
        "checksum": "sha256:" + hashlib.sha256(payload).hexdigest(),
        "tensors": entries,
        "config": config_echo or {},
        "merge_order": list(merge_order or []),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.with_name(path.name + ".bin"), "wb") as fh:
        fh.write(payload)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return path


def load_checkpoint(path):
    """-> (param arrays, buffer arrays, config echo, merge order).

    Arrays come back in native byte order with their recorded shapes.
    """
    path = Path(path)
    with open(path) as fh:
        manifest = json.load(fh)
    payload_path = path.with_name(manifest["payload"])
    payload = payload_path.read_bytes()
    want = manifest["checksum"]
    got = "sha256:" + hashlib.sha256(payload).hexdigest()
    if want != got:
        raise ChecksumError(f"payload {payload_path} checksum mismatch "
                            f"(manifest {want}, actual {got})")
    params, buffers = {}, {}
    for entry in manifest["tensors"]:
        start = entry["offset"]
        raw = payload[start:start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_le_dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]), copy=True)
        (params if entry["kind"] == "param" else buffers)[entry["name"]] = arr
    return params, buffers, manifest.get("config", {}), manifest.get("merge_order", [])
