"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"TGCKPT\\x00\\x00"
    version      uint32    CHECKPOINT_VERSION
    meta_len     uint32    length of the JSON metadata blob
    meta         bytes     UTF-8 JSON (sorted keys), e.g. model config
    n_entries    uint32
    entries, in insertion order:
        key_len  uint16
        key      bytes     UTF-8
        ndim     uint8
        dims     uint32 * ndim
        data     float64 little-endian * prod(dims), row-major
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .schema import DataError, ParseError, VersionError

MAGIC = b"TGCKPT\x00\x00"
CHECKPOINT_VERSION = 1


def dumps_checkpoint(params: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob,
             struct.pack("<I", len(params))]
    for key, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        kb = key.encode("utf-8")
        parts.append(struct.pack("<H", len(kb)) + kb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads_checkpoint(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"{source}: truncated at offset {pos} while reading {what}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC), "magic") != MAGIC:
        raise ParseError(f"{source}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{source}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{source}: corrupt metadata at offset {pos - meta_len}") from exc
    (n,) = struct.unpack("<I", take(4, "entry count"))
    params = {}
    for i in range(n):
        (klen,) = struct.unpack("<H", take(2, f"entry {i} key length"))
        key = take(klen, f"entry {i} key").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"{key} ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{key} shape"))
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(8 * count, f"{key} data"), dtype="<f8")
        params[key] = data.astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise ParseError(f"{source}: {len(buf) - pos} trailing bytes at offset {pos}")
    return params, meta


def save_checkpoint(path: str, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(params, meta))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    return loads_checkpoint(buf, path)
