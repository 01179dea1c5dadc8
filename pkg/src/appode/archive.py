"""Tensor archive: named float32 arrays plus a JSON metadata block in one file.

Layout (all integers little-endian)::

    8 bytes   magic  b"NODEAPP1"
    u32       format version
    u64       manifest length N
    N bytes   UTF-8 JSON manifest {"version", "meta", "tensors": [{name, dtype, shape, offset, nbytes}]}
    ...       raw little-endian float32 payloads; offsets are relative to the payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"NODEAPP1"
VERSION = 1
_HEADER = struct.Struct("<IQ")


class ArchiveError(ValueError):
    pass


def save_archive(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4", order="C")
        raw = a.tobytes()
        entries.append({"name": name, "dtype": "float32", "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": VERSION, "meta": dict(meta or {}), "tensors": entries}).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + _HEADER.size or data[: len(MAGIC)] != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive (bad magic)")
    version, mlen = _HEADER.unpack_from(data, len(MAGIC))
    if version > VERSION:
        raise ArchiveError(f"{path}: archive format version {version} is newer than supported {VERSION}")
    start = len(MAGIC) + _HEADER.size
    if start + mlen > len(data):
        raise ArchiveError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: corrupt manifest") from exc
    base = start + mlen
    out: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "float32":
            raise ArchiveError(f"{path}: unsupported dtype {e['dtype']} for {e['name']}")
        lo = base + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data):
            raise ArchiveError(f"{path}: truncated payload for {e['name']}")
        shape = tuple(e["shape"])
        if int(np.prod(shape, dtype=np.int64)) * 4 != e["nbytes"]:
            raise ArchiveError(f"{path}: shape {shape} disagrees with byte count for {e['name']}")
        out[e["name"]] = np.frombuffer(data[lo:hi], dtype="<f4").reshape(shape).astype(np.float32)
    return out, manifest.get("meta", {})
