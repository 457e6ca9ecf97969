"""Versioned binary checkpoint container.

Layout::

    b"SIDACKPT" | u32 format version | u64 header length | header JSON | blobs

The header holds run metadata (config hash, images seen, stage flag, role)
and a blob table of (name, dtype, shape, offset, nbytes). Blobs are raw
little-endian array bytes, so a load/save round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SIDACKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def encode(tensors: dict[str, torch.Tensor], meta: dict) -> bytes:
    table = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy()
        shape = list(arr.shape)  # ascontiguousarray promotes 0-d arrays to 1-d
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table.append(
            {"name": name, "dtype": arr.dtype.str, "shape": shape, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["blobs"] = table
    hjson = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hjson)) + hjson + b"".join(blobs)


def decode(data: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    header = json.loads(data[20 : 20 + hlen])
    base = 20 + hlen
    tensors = {}
    for entry in header["blobs"]:
        raw = data[base + entry["offset"] : base + entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(tuple(entry["shape"]))
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    meta = {k: v for k, v in header.items() if k != "blobs"}
    return tensors, meta


def save(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    atomic_write_bytes(path, encode(tensors, meta))


def load(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    state = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    module.load_state_dict(state)
