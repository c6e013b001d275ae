"""Versioned, checksummed checkpoint container.

Layout: one header line ``FOSCKPT <version> <kind> <sha256-of-payload>`` followed
by a ``torch.save`` payload holding tensors and plain metadata.
"""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import torch

CHECKPOINT_VERSION = 1
MAGIC = b"FOSCKPT"


class CorruptCheckpoint(Exception):
    pass


def state_checksum(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, kind: str, payload: dict) -> Path:
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = b"%s %d %s %s\n" % (MAGIC, CHECKPOINT_VERSION, kind.encode(), hashlib.sha256(body).hexdigest().encode())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + body)
    return path


def load_checkpoint(path: str | Path, kind: str) -> dict:
    raw = Path(path).read_bytes()
    header, sep, body = raw.partition(b"\n")
    parts = header.split(b" ")
    if not sep or len(parts) != 4 or parts[0] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    if parts[1] != str(CHECKPOINT_VERSION).encode():
        raise CorruptCheckpoint(f"{path}: unsupported checkpoint version {parts[1]!r}")
    if parts[2] != kind.encode():
        raise CorruptCheckpoint(f"{path}: expected a {kind!r} checkpoint, found {parts[2]!r}")
    if hashlib.sha256(body).hexdigest().encode() != parts[3]:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    try:
        return torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
    except Exception as exc:  # payload matched its hash but cannot be decoded
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
