"""Binary model checkpoints.

Layout: magic "OCAD", u32 format version, model kind, a config echo
(key=value text), a named tensor table (float64 little-endian), and a
trailing SHA-256 over everything before it. The checksum is verified before
any tensor is accepted.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"OCAD"
VERSION = 1
KINDS = ("ganomaly", "anogan")


class CheckpointError(ValueError):
    pass


def _write_blob(fh, data: bytes):
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_blob(buf: io.BytesIO) -> bytes:
    raw = buf.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint")
    (n,) = struct.unpack("<I", raw)
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def save_checkpoint(path, kind, config: dict, named_tensors):
    """Write a checkpoint. `named_tensors` is an ordered (name, array)
    iterable; order is preserved and significant for reproducibility."""
    if kind not in KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    body = io.BytesIO()
    body.write(MAGIC)
    body.write(struct.pack("<I", VERSION))
    _write_blob(body, kind.encode("ascii"))
    cfg_text = "".join(f"{k} = {v}\n" for k, v in sorted(config.items()))
    _write_blob(body, cfg_text.encode("utf-8"))
    tensors = list(named_tensors)
    body.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        _write_blob(body, name.encode("utf-8"))
        body.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            body.write(struct.pack("<Q", d))
        body.write(arr.astype("<f8").tobytes())
    payload = body.getvalue()
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(payload + digest)


def load_checkpoint(path):
    """Read and verify a checkpoint. Returns (kind, config dict, ordered
    dict of name -> float64 array)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 + 32:
        raise CheckpointError(f"{path}: file too short")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    buf = io.BytesIO(payload)
    if buf.read(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    kind = _read_blob(buf).decode("ascii")
    if kind not in KINDS:
        raise CheckpointError(f"{path}: unknown kind {kind!r}")
    config = {}
    for line in _read_blob(buf).decode("utf-8").splitlines():
        key, _, value = line.partition(" = ")
        config[key] = value
    (n_tensors,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(n_tensors):
        name = _read_blob(buf).decode("utf-8")
        (ndim,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(buf.read(8 * count), dtype="<f8", count=count)
        tensors[name] = data.reshape(shape).astype(np.float64)
    return kind, config, tensors
