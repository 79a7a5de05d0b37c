"""Binary checkpoint format.

Layout::

    b"CRCN" | version (1 byte) | config digest (32 bytes) | header length (u32 LE)
    | header JSON | tensor buffers (little-endian, in manifest order)

The header holds the model config, the training step, free-form metadata and
the manifest: an ordered list of ``{name, dtype, shape, offset, nbytes}`` with
offsets relative to the start of the buffer section.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CRCN"
VERSION = 1
_PREFIX = len(MAGIC) + 1 + 32 + 4


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    digest: bytes
    tensors: dict  # name -> ndarray, insertion order is the manifest order
    step: int = 0
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        manifest, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            a = np.ascontiguousarray(arr)
            le = a.astype(a.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            manifest.append({"name": name, "dtype": a.dtype.str.lstrip("<>|="), "shape": list(a.shape),
                             "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps({"config": self.config, "step": int(self.step), "meta": self.meta,
                             "manifest": manifest}, separators=(",", ":")).encode()
        if len(self.digest) != 32:
            raise CheckpointError("config digest must be 32 bytes")
        return b"".join([MAGIC, bytes([VERSION]), self.digest, struct.pack("<I", len(header)), header, *chunks])

    @classmethod
    def from_bytes(cls, blob: bytes, expected_digest: bytes | None = None, force: bool = False) -> "Checkpoint":
        if len(blob) < _PREFIX:
            raise CheckpointError(f"truncated checkpoint: {len(blob)} bytes, header needs {_PREFIX} (offset {len(blob)})")
        if blob[:4] != MAGIC:
            raise CheckpointError(f"bad magic {blob[:4]!r} at offset 0")
        if blob[4] != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {blob[4]} at offset 4")
        digest = blob[5:37]
        (hlen,) = struct.unpack("<I", blob[37:41])
        if len(blob) < _PREFIX + hlen:
            raise CheckpointError(f"truncated checkpoint header at offset {len(blob)} (expected {_PREFIX + hlen})")
        try:
            header = json.loads(blob[_PREFIX:_PREFIX + hlen])
        except ValueError as e:
            raise CheckpointError(f"malformed checkpoint header at offset {_PREFIX}: {e}") from None
        if expected_digest is not None and digest != expected_digest and not force:
            raise CheckpointError("checkpoint config digest does not match the requested config (use force to override)")
        base = _PREFIX + hlen
        tensors = {}
        for entry in header["manifest"]:
            start = base + entry["offset"]
            end = start + entry["nbytes"]
            if end > len(blob):
                raise CheckpointError(f"truncated buffer for {entry['name']}: needs bytes up to offset {end}, file ends at {len(blob)}")
            dt = np.dtype(entry["dtype"]).newbyteorder("<")
            arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(entry["shape"], dtype=np.int64)), offset=start)
            tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
        if base + sum(e["nbytes"] for e in header["manifest"]) != len(blob):
            raise CheckpointError(f"trailing bytes after offset {base + sum(e['nbytes'] for e in header['manifest'])}")
        return cls(header["config"], digest, tensors, header["step"], header.get("meta", {}))

    def save(self, path) -> None:
        """Atomic write: a failed run never leaves a half-written file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, expected_digest: bytes | None = None, force: bool = False) -> "Checkpoint":
        try:
            blob = Path(path).read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
        return cls.from_bytes(blob, expected_digest, force)


def model_checkpoint(model, step: int = 0, optimizer=None, meta: dict | None = None) -> Checkpoint:
    """Snapshot of parameters (canonical order) and optional momentum buffers."""
    tensors = {name: p.data.copy() for name, p in model.named_parameters()}
    if optimizer is not None:
        names = [name for name, _ in model.named_parameters()]
        for name, v in zip(names, optimizer.velocity):
            tensors["opt/" + name] = v.copy()
    return Checkpoint(model.config.to_dict(), model.config.digest(), tensors, step, dict(meta or {}))


def restore(model, ckpt: Checkpoint, optimizer=None, force: bool = False) -> None:
    """Copy checkpoint tensors into ``model`` (and ``optimizer``) in place."""
    if ckpt.digest != model.config.digest() and not force:
        raise CheckpointError("checkpoint was written for a different model config")
    for name, p in model.named_parameters():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        src = ckpt.tensors[name]
        if src.shape != p.data.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {src.shape} vs model {p.data.shape}")
        p.data = src.astype(p.data.dtype, copy=True)
    if optimizer is not None:
        names = [name for name, _ in model.named_parameters()]
        for i, name in enumerate(names):
            v = ckpt.tensors.get("opt/" + name)
            optimizer.velocity[i] = np.zeros_like(optimizer.velocity[i]) if v is None else v.copy()
