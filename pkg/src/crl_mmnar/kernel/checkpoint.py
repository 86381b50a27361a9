"""Single-file parameter checkpoints.

Layout (all integers little-endian)::

    b"CRLMMCKP"            magic
    uint32                 format version
    uint64                 header length in bytes
    header                 UTF-8 JSON: {"version", "meta", "manifest": [[name, shape], ...]}
    float64[...]           parameter arrays, little-endian, manifest order, row-major
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"CRLMMCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(params: "OrderedDict[str, np.ndarray]", meta: dict | None = None) -> bytes:
    manifest = [[name, list(np.shape(arr))] for name, arr in params.items()]
    header = json.dumps({"version": VERSION, "meta": meta or {}, "manifest": manifest},
                        sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header]
    for arr in params.values():
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_checkpoint(payload: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    if payload[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", payload, off)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(payload[off:off + hlen].decode("utf-8"))
    off += hlen
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(payload):
            raise CheckpointError(f"truncated checkpoint at parameter {name}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off)
        params[name] = arr.astype(np.float64).reshape(shape)
        off += nbytes
    if off != len(payload):
        raise CheckpointError("trailing bytes after last parameter")
    return params, header["meta"]


def save_checkpoint(path, params, meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(params, meta))


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    return decode_checkpoint(Path(path).read_bytes())
