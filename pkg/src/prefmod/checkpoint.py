"""Single-file checkpoint container.

Layout: 8-byte magic, 1-byte format version, little-endian u64 manifest length,
the JSON manifest, then the raw little-endian float64 tensor payloads in manifest
order. The manifest lists every tensor with its shape, byte offset and SHA-256.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .numcore import AdamState

MAGIC = b"PMCKPT\x00\x00"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, Any]
    fingerprint: str
    tensors: dict[str, dict[str, np.ndarray]]     # group -> name -> array
    optimizer: AdamState | None = None
    rng: dict[str, Any] = field(default_factory=dict)
    step: int = 0
    history: list[dict[str, Any]] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def group(self, name: str) -> dict[str, np.ndarray]:
        try:
            return self.tensors[name]
        except KeyError:
            raise CheckpointError(f"checkpoint has no tensor group {name!r}") from None


def _optimizer_json(opt: AdamState | None):
    if opt is None:
        return None
    return {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "step": opt.step, "names": sorted(opt.m)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    payload = []
    offset = 0

    def add(name: str, arr: np.ndarray):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
        payload.append(raw)
        offset += len(raw)

    for group in sorted(ckpt.tensors):
        for name in sorted(ckpt.tensors[group]):
            add(f"{group}/{name}", ckpt.tensors[group][name])
    if ckpt.optimizer is not None:
        for name in sorted(ckpt.optimizer.m):
            add(f"adam.m/{name}", ckpt.optimizer.m[name])
            add(f"adam.v/{name}", ckpt.optimizer.v[name])
    manifest = {
        "config": ckpt.config, "fingerprint": ckpt.fingerprint, "optimizer": _optimizer_json(ckpt.optimizer),
        "rng": ckpt.rng, "step": ckpt.step, "history": ckpt.history, "meta": ckpt.meta,
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    header = MAGIC + bytes([ckpt.version]) + struct.pack("<Q", len(blob))
    return header + blob + b"".join(payload)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 17 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = data[8]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported "
                                     f"(expected {FORMAT_VERSION})")
    (mlen,) = struct.unpack_from("<Q", data, 9)
    start = 17 + mlen
    if start > len(data):
        raise CheckpointError("truncated checkpoint manifest")
    try:
        manifest = json.loads(data[17:start])
    except ValueError as e:
        raise CheckpointError(f"corrupt checkpoint manifest: {e}") from e
    tensors: dict[str, dict[str, np.ndarray]] = {}
    moments: dict[str, dict[str, np.ndarray]] = {"adam.m": {}, "adam.v": {}}
    for e in manifest["tensors"]:
        lo = start + e["offset"]
        raw = data[lo:lo + e["nbytes"]]
        if len(raw) != e["nbytes"] or hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"checksum mismatch for tensor {e['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
        group, name = e["name"].split("/", 1)
        if group in moments:
            moments[group][name] = arr
        else:
            tensors.setdefault(group, {})[name] = arr
    opt = None
    oj = manifest["optimizer"]
    if oj is not None:
        opt = AdamState(lr=oj["lr"], beta1=oj["beta1"], beta2=oj["beta2"], eps=oj["eps"],
                        step=oj["step"], m=moments["adam.m"], v=moments["adam.v"])
    return Checkpoint(manifest["config"], manifest["fingerprint"], tensors, opt,
                      manifest["rng"], manifest["step"], manifest["history"], manifest["meta"],
                      version)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the same directory, fsync, rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
