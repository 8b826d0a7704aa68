"""Binary checkpoint container shared by encoder and regressor exports.

Layout (little-endian):

    magic          8 bytes, b"SVCKPT01"
    header length  uint32
    header         UTF-8 JSON: format_version, kind, config echo, and a
                   parameter manifest [{name, dtype, shape, offset, nbytes}]
    body           concatenated raw parameter blobs at the manifest offsets
    checksum       32 bytes, sha256 over everything before it

Round-trips are bit-exact: blobs are the arrays' raw bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .core import atomic_write_bytes

CHECKPOINT_MAGIC = b"SVCKPT01"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Checkpoint file is missing, corrupt, or incompatible."""


def save_checkpoint(path, kind: str, config: dict, state: dict[str, np.ndarray]) -> None:
    """Serialize named arrays plus a config echo into the container format."""
    manifest = []
    blobs = []
    offset = 0
    for name, array in state.items():
        array = np.ascontiguousarray(array)
        blob = array.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": array.dtype.name,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "kind": kind, "config": config, "params": manifest},
        sort_keys=True,
    ).encode("utf-8")
    payload = CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)
    atomic_write_bytes(Path(path), payload + hashlib.sha256(payload).digest())


def load_checkpoint(path, expected_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (kind, config, state). Verifies the whole-file checksum."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + 32:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    (header_len,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
    header_start = len(CHECKPOINT_MAGIC) + 4
    try:
        header = json.loads(payload[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')!r} not supported (expected {CHECKPOINT_VERSION})"
        )
    kind = header.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"{path}: checkpoint kind {kind!r}, expected {expected_kind!r}")
    body = payload[header_start + header_len :]
    state: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        blob = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise CheckpointError(f"{path}: parameter {entry['name']!r} truncated")
        state[entry["name"]] = np.frombuffer(blob, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return kind, header["config"], state
