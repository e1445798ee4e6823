"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    8 bytes   magic  b"FSDCKPT1"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header, canonical form (sorted keys, no spaces)
    payload   concatenated float64 little-endian row-major arrays

The header lists every array (name, shape, byte offset into the payload),
the encoder config, and free-form metadata. Writing is fully deterministic:
saving the result of a load reproduces the original bytes.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .memory import MemoryBank
from .model import EncoderConfig, EncoderParams
from .tensor import Tensor

MAGIC = b"FSDCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig | None
    arrays: dict[str, np.ndarray]
    metadata: dict

    def params(self) -> EncoderParams:
        if self.encoder_config is None:
            raise CheckpointError("checkpoint carries no encoder config")
        model_arrays = {k: v for k, v in self.arrays.items()
                        if not k.startswith("memory.")}
        return EncoderParams.from_named(model_arrays,
                                        self.encoder_config.n_layers)

    def memory(self) -> MemoryBank | None:
        if "memory.centroids" not in self.arrays:
            return None
        src = self.metadata.get("memory_source", "teacher")
        return MemoryBank(Tensor(self.arrays["memory.centroids"].copy()),
                          trainable=False, source=src)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save(path: str, encoder_config: EncoderConfig | None,
         params: EncoderParams | None = None,
         memory: MemoryBank | None = None,
         metadata: dict | None = None,
         extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    if params is not None:
        arrays.extend((name, t.data) for name, t in params.named_tensors())
    if memory is not None:
        arrays.append(("memory.centroids", memory.centroids.data))
    for name, arr in (extra_arrays or {}).items():
        arrays.append((name, np.asarray(arr, dtype=np.float64)))

    meta = dict(metadata or {})
    if memory is not None:
        meta.setdefault("memory_source", memory.source)

    directory = []
    offset = 0
    payload_parts = []
    for name, arr in arrays:
        arr64 = np.ascontiguousarray(arr, dtype="<f8")
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": offset, "dtype": "<f8"})
        payload_parts.append(arr64.tobytes())
        offset += arr64.nbytes

    header = {
        "format_version": FORMAT_VERSION,
        "encoder_config": encoder_config.to_dict() if encoder_config else None,
        "arrays": directory,
        "metadata": meta,
    }
    blob = _canonical_json(header)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for part in payload_parts:
            fh.write(part)
    os.replace(tmp, path)


def load(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        hlen = int.from_bytes(fh.read(4), "little")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version "
                f"{header.get('format_version')}")
        payload = fh.read()

    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=start).reshape(shape)
        arrays[entry["name"]] = arr.copy()

    cfg = header["encoder_config"]
    encoder_config = EncoderConfig.from_dict(cfg) if cfg else None
    return Checkpoint(encoder_config, arrays, header.get("metadata", {}))
