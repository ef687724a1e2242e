"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"UWRCKPT\\0"
    version    u32
    hdr_len    u64       length of the JSON header in bytes
    header     hdr_len   UTF-8 JSON: {"meta": {...}, "arrays": [entry, ...]}
    payload    ...       raw array bytes, concatenated in header order
    digest     32 bytes  SHA-256 over everything before it

Each array entry is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with
``dtype`` a little-endian numpy dtype string (``"<f8"``, ``"|u1"``, ...) and
``offset`` relative to the start of the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

MAGIC = b"UWRCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(IOError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


def _as_numpy(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    a = np.ascontiguousarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(params: Mapping[str, object], meta: dict, path: os.PathLike) -> None:
    """Write ``params`` (name -> array/tensor) and JSON-able ``meta`` atomically."""
    entries, blobs, offset = [], [], 0
    for name, value in params.items():
        arr = _as_numpy(value)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    digest = hashlib.sha256(body).digest()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
            fh.write(digest)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: os.PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size + 32:
        raise ChecksumError(f"{path}: file too short to be a checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (corrupt or truncated file)")
    magic, version, hdr_len = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size
    header = json.loads(body[start:start + hdr_len].decode("utf-8"))
    payload = memoryview(body)[start + hdr_len:]
    params = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        params[e["name"]] = arr
    return params, header["meta"]


def module_arrays(prefix: str, module: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{k}": _as_numpy(v) for k, v in module.state_dict().items()}


def load_module_arrays(prefix: str, module: torch.nn.Module, params: Mapping[str, np.ndarray]) -> None:
    p = prefix + "."
    state = {k[len(p):]: torch.from_numpy(v.copy()) for k, v in params.items() if k.startswith(p)}
    if not state:
        raise CheckpointError(f"checkpoint has no arrays for {prefix!r}")
    module.load_state_dict(state)
