"""Byte-stable binary container for named arrays.

Layout::

    8 bytes   magic  b"TOYUNL01"
    8 bytes   header length N, unsigned little-endian
    N bytes   UTF-8 JSON header, keys sorted, no whitespace:
              {"meta": {...}, "arrays": [{"name", "tag", "shape", "dtype",
               "offset", "nbytes"}, ...]}
    payload   arrays back to back, C order, little-endian

``dtype`` is one of ``<f8`` (float64), ``|u1`` (uint8) or ``<i8``; boolean
arrays are stored as ``|u1`` with ``"bool": true`` on their entry.
Offsets are relative to the start of the payload. Nothing time- or
host-dependent is written, so equal inputs give equal bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

MAGIC = b"TOYUNL01"
_DTYPES = {"<f8": np.dtype("<f8"), "|u1": np.dtype("|u1"), "<i8": np.dtype("<i8")}


class ContainerError(ValueError):
    pass


def _canonical(arr: np.ndarray) -> tuple[np.ndarray, str]:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_ or arr.dtype == np.uint8:
        return np.ascontiguousarray(arr.astype("|u1")), "|u1"
    if np.issubdtype(arr.dtype, np.integer):
        return np.ascontiguousarray(arr.astype("<i8")), "<i8"
    return np.ascontiguousarray(arr.astype("<f8")), "<f8"


def dumps(arrays: Iterable[tuple[str, np.ndarray, Optional[str]]], meta: dict) -> bytes:
    entries, blobs, offset = [], [], 0
    seen = set()
    for name, arr, tag in arrays:
        if name in seen:
            raise ContainerError(f"duplicate array name {name!r}")
        seen.add(name)
        data, dtype = _canonical(arr)
        raw = data.tobytes(order="C")
        entry = {"name": name, "tag": tag, "shape": list(data.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)}
        if np.asarray(arr).dtype == np.bool_:
            entry["bool"] = True
        entries.append(entry)
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def loads(blob: bytes) -> tuple[dict, "OrderedDict[str, tuple[np.ndarray, Optional[str]]]"]:
    if blob[:8] != MAGIC:
        raise ContainerError("not a toyunlearn container (bad magic)")
    if len(blob) < 16:
        raise ContainerError("truncated container header")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError("corrupt container header") from exc
    payload = memoryview(blob)[16 + n :]
    out: "OrderedDict[str, tuple[np.ndarray, Optional[str]]]" = OrderedDict()
    for e in header["arrays"]:
        if e["dtype"] not in _DTYPES:
            raise ContainerError(f"unsupported dtype {e['dtype']!r}")
        dt = _DTYPES[e["dtype"]]
        if e["offset"] + e["nbytes"] > len(payload):
            raise ContainerError(f"array {e['name']!r} runs past the end of the payload")
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).copy()
        if e.get("bool"):
            arr = arr.astype(bool)
        out[e["name"]] = (arr, e["tag"])
    return header["meta"], out


def save(path, arrays, meta: dict) -> str:
    """Write a container; returns the sha256 of its bytes."""
    blob = dumps(arrays, meta)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return loads(path.read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
