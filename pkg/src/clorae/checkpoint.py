"""Flat binary checkpoint: named float64 payloads plus a JSON manifest.

Layout: magic, 8-byte little-endian header length, JSON header (manifest and
tensor directory), then the concatenated raw little-endian float64 buffers.
Round trips are bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CLORAECKPT1\n"


class CheckpointError(RuntimeError):
    """Unreadable or incompatible checkpoint."""


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray],
                    manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    offset = 0
    buffers = []
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8", order="C")
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": offset, "nbytes": arr.nbytes})
        buffers.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"manifest": manifest, "tensors": directory},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for buf in buffers:
            f.write(buf)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (header_len,) = struct.unpack("<Q", f.read(8))
        try:
            header = json.loads(f.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header in {path}: {e}")
        payload = f.read()
    state = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"truncated checkpoint payload in {path}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f8")
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return header["manifest"], state
