"""Binary checkpoint format for model and encoder weights.

Layout, all integers little-endian:

    bytes 0-7    magic b"BTUNETCK"
    bytes 8-11   format version, uint32
    bytes 12-15  manifest length M, uint32
    bytes 16-    UTF-8 JSON manifest (M bytes)
    then         payload: contiguous float32 tensor blobs at the offsets
                 declared in the manifest (relative to payload start)

The manifest carries the architecture config, a PRETRAIN/FINETUNE phase
tag, the training seed, and per-tensor shape/offset entries. Loading is
strict: wrong magic, unknown version, or byte ranges outside the payload
raise CheckpointError. Save/load round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import Module
from .errors import CheckpointError

MAGIC = b"BTUNETCK"
FORMAT_VERSION = 1
PHASES = ("PRETRAIN", "FINETUNE")
_HEADER = struct.Struct("<8sII")


@dataclass
class Checkpoint:
    arch: dict
    phase: str
    seed: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.phase not in PHASES:
            raise CheckpointError(f"phase must be one of {PHASES}, got '{self.phase}'")
        for name, arr in self.tensors.items():
            if arr.dtype != np.float32:
                raise CheckpointError(
                    f"checkpoint payload is float32-only; '{name}' is {arr.dtype}"
                )

    @classmethod
    def from_module(cls, module: Module, arch: dict, phase: str, seed: int,
                    prefix: str | None = None) -> "Checkpoint":
        tensors = {
            k: t.data.astype(np.float32, copy=True)
            for k, t in module.named_state()
            if prefix is None or k.startswith(prefix)
        }
        return cls(arch=arch, phase=phase, seed=seed, tensors=tensors)

    def save(self, path) -> None:
        entries = {}
        blobs = []
        offset = 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            raw = arr.tobytes()
            entries[name] = {
                "shape": list(arr.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": len(raw),
            }
            blobs.append(raw)
            offset += len(raw)
        manifest = json.dumps(
            {
                "format_version": self.format_version,
                "phase": self.phase,
                "seed": self.seed,
                "arch": self.arch,
                "tensors": entries,
            },
            sort_keys=True,
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, self.format_version, len(manifest)))
            fh.write(manifest)
            for raw in blobs:
                fh.write(raw)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise CheckpointError(f"{path}: file shorter than header")
        magic, version, mlen = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})"
            )
        if len(raw) < _HEADER.size + mlen:
            raise CheckpointError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(raw[_HEADER.size : _HEADER.size + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: undecodable manifest: {exc}") from exc
        payload = raw[_HEADER.size + mlen :]
        tensors = {}
        for name, entry in manifest.get("tensors", {}).items():
            if entry.get("dtype") != "float32":
                raise CheckpointError(f"{path}: tensor '{name}' has non-float32 dtype")
            shape = tuple(entry["shape"])
            offset, nbytes = entry["offset"], entry["nbytes"]
            expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            if nbytes != expected:
                raise CheckpointError(
                    f"{path}: tensor '{name}' declares {nbytes} bytes for shape {shape}"
                )
            if offset < 0 or offset + nbytes > len(payload):
                raise CheckpointError(
                    f"{path}: tensor '{name}' byte range [{offset}, {offset + nbytes}) "
                    f"outside payload of {len(payload)} bytes"
                )
            tensors[name] = (
                np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
                .reshape(shape)
                .copy()
            )
        return cls(
            arch=manifest["arch"],
            phase=manifest["phase"],
            seed=manifest["seed"],
            tensors=tensors,
            format_version=version,
        )
