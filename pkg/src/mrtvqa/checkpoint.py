"""Binary checkpoint format.

Layout (all integers little-endian):
    magic   4 bytes  b"MRTC"
    version u32      currently 1
    count   u32      number of named arrays
    entry * count:
        name_len u16, name utf-8 bytes
        dtype    u8   0 = float32, 1 = float64
        ndim     u8
        dims     ndim * u32
        payload  raw little-endian floats, row-major

Model checkpoints pair this file with a JSON sidecar (same path + ".json")
holding the model configuration and vocabularies.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MRTC"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, named_arrays, sidecar=None):
    """Write (name, ndarray) pairs; optional sidecar dict goes to path+'.json'."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(named_arrays)))
        for name, arr in named_arrays:
            arr = np.asarray(arr)
            if arr.dtype not in _TAG_FOR:
                raise CheckpointFormatError(f"{name}: unsupported dtype {arr.dtype}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _TAG_FOR[arr.dtype], arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    if sidecar is not None:
        with open(str(path) + ".json", "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(
            f"truncated checkpoint while reading {what} at byte offset {f.tell() - len(buf)}"
        )
    return buf


def load_checkpoint(path):
    """Read back the ordered (name, ndarray) list."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic bytes (not an MRTC file)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "count"))
        out = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            tag, ndim = struct.unpack("<BB", _read_exact(f, 2, "dtype/ndim"))
            if tag not in _DTYPE_TAGS:
                raise CheckpointFormatError(f"{path}: unknown dtype tag {tag} for {name}")
            dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "dims")) if ndim else ()
            dtype = _DTYPE_TAGS[tag]
            n_items = int(np.prod(dims, dtype=np.int64)) if dims else 1
            payload = _read_exact(f, n_items * dtype.itemsize, f"payload of {name}")
            arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
            out.append((name, arr))
    return out


def load_sidecar(path):
    with open(str(path) + ".json") as f:
        return json.load(f)


def save_module(path, module, sidecar=None):
    """Checkpoint a Module's parameters and running buffers."""
    named = [(n, p.data) for n, p in module.named_parameters()]
    named += [(f"buffer::{n}", b) for n, b in module.named_buffers()]
    save_checkpoint(path, named, sidecar=sidecar)


def load_module(path, module):
    """Restore parameters/buffers in place; names must match exactly."""
    stored = dict(load_checkpoint(path))
    for n, p in module.named_parameters():
        if n not in stored:
            raise CheckpointFormatError(f"checkpoint missing parameter {n}")
        arr = stored.pop(n)
        if arr.shape != p.data.shape:
            raise CheckpointFormatError(
                f"parameter {n}: checkpoint shape {arr.shape} != model shape {p.data.shape}"
            )
        p.data[...] = arr.astype(p.data.dtype)
    for n, b in module.named_buffers():
        key = f"buffer::{n}"
        if key not in stored:
            raise CheckpointFormatError(f"checkpoint missing buffer {n}")
        b[...] = stored.pop(key).astype(b.dtype)
    if stored:
        raise CheckpointFormatError(f"checkpoint has unused entries: {sorted(stored)[:3]}...")
