"""Versioned binary checkpoints.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
then every parameter as little-endian float64 in ``parameters()`` order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..architectures import JointNetwork, NetworkSpec

MAGIC = b"JNNCKPT\x01"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or mismatched checkpoints."""


def save_checkpoint(model: JointNetwork, path: str | Path, digest: str = "", epoch: int = 0,
                    rng_state: dict | None = None) -> None:
    params = model.parameters()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params)
    header = {
        "version": VERSION,
        "spec": model.spec.to_dict(),
        "digest": digest,
        "epoch": epoch,
        "rng_state": rng_state,
        "dtype": str(model.dtype),
        "shapes": [list(p.shape) for p in params],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob + payload)
    tmp.replace(path)


def read_header(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes() if Path(path).is_file() else None
    if raw is None:
        raise CheckpointError(f"checkpoint not found: {path}")
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + n])
    except ValueError:
        raise CheckpointError(f"{path}: corrupt header") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, raw[12 + n :]


def load_checkpoint(path: str | Path, expected_digest: str | None = None) -> tuple[JointNetwork, dict]:
    """Rebuild the model; refuses on truncation, corruption or digest mismatch."""
    header, payload = read_header(path)
    if expected_digest is not None and header["digest"] != expected_digest:
        raise CheckpointError(
            f"config digest mismatch: checkpoint has {header['digest']}, config has {expected_digest}")
    expected = sum(int(np.prod(s)) for s in header["shapes"]) * 8
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {expected} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    spec = NetworkSpec.from_dict(header["spec"])
    model = JointNetwork(spec, seed=0, dtype=np.dtype(header["dtype"]))
    params = model.parameters()
    if [list(p.shape) for p in params] != header["shapes"]:
        raise CheckpointError(f"{path}: parameter shapes do not match the stored architecture")
    values = np.frombuffer(payload, dtype="<f8")
    offset = 0
    for p in params:
        n = p.data.size
        p.data = values[offset : offset + n].reshape(p.shape).astype(p.data.dtype)
        p.zero_grad()
        p.momentum_buf = np.zeros_like(p.data)
        offset += n
    return model, header
