"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"LATSRCKP"
    uint32    format version
    uint64    header length in bytes
    header    UTF-8 JSON: format_version, stage, step, config, tensors
              [{name, shape, dtype, offset, nbytes}], payload_size, payload_sha256
    payload   raw little-endian tensor bytes, concatenated in header order
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"LATSRCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "u1"}


@dataclass
class CheckpointManifest:
    stage: int
    config: dict
    tensors: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    step: int = 0

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]


def state_to_arrays(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def apply_arrays(module: torch.nn.Module, tensors: dict, prefix: str = "") -> None:
    """Load ``prefix``-scoped arrays into ``module``; every parameter must be present."""
    expected = module.state_dict()
    missing = [prefix + k for k in expected if prefix + k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint is missing {len(missing)} tensors: {', '.join(missing)}")
    state = {}
    for k, ref in expected.items():
        arr = tensors[prefix + k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"tensor {prefix + k} has shape {arr.shape}, expected {tuple(ref.shape)}")
        state[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(state)


def encode(manifest: CheckpointManifest) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in manifest.tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "format_version": manifest.format_version,
        "stage": manifest.stage,
        "step": manifest.step,
        "config": manifest.config,
        "tensors": entries,
        "payload_size": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, manifest.format_version, len(header_bytes)) + header_bytes + payload


def decode(blob: bytes) -> CheckpointManifest:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    start = _PREFIX.size + header_len
    if len(blob) < start:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = blob[start:]
    if len(payload) != header["payload_size"]:
        raise CheckpointError(f"payload is {len(payload)} bytes, header declares {header['payload_size']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch")
    tensors, expected_offset = {}, 0
    for entry in header["tensors"]:
        name, dtype = entry["name"], entry["dtype"]
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * np.dtype(_DTYPES[dtype]).itemsize
        if entry["offset"] != expected_offset or entry["nbytes"] != nbytes:
            raise CheckpointError(f"offset/shape mismatch for tensor {name}")
        raw = payload[entry["offset"]:entry["offset"] + nbytes]
        tensors[name] = np.frombuffer(raw, dtype=_DTYPES[dtype]).astype(dtype).reshape(entry["shape"])
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise CheckpointError("payload has trailing bytes not described by the header")
    return CheckpointManifest(
        stage=header["stage"], config=header["config"], tensors=tensors,
        format_version=header["format_version"], step=header.get("step", 0),
    )


def save_checkpoint(path, manifest: CheckpointManifest) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(manifest))
    os.replace(tmp, path)


def load_checkpoint(path) -> CheckpointManifest:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(blob)
