"""Tensor archive (``.tnsa``) reader/writer plus JSON sidecar helpers.

Layout::

    u64 little-endian header length
    UTF-8 JSON header {"version": 1, "entries": [{"name", "shape", "dtype"}]}
    row-major little-endian float32 payloads, concatenated in entry order
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import LoadError

VERSION = 1
_LE_F32 = np.dtype("<f4")


def _as_array(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.asarray(value, dtype=_LE_F32, order="C")  # keeps 0-d shapes, unlike ascontiguousarray


def write_archive(path: str | Path, tensors: Mapping[str, Any]) -> None:
    entries = []
    payloads = []
    for name, value in tensors.items():
        arr = _as_array(value)
        entries.append({"name": str(name), "shape": [int(s) for s in arr.shape], "dtype": "f32"})
        payloads.append(arr.tobytes(order="C"))
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ValueError("tensor names must be unique")
    header = json.dumps({"version": VERSION, "entries": entries}, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def read_archive(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from exc
    if len(data) < 8:
        raise LoadError(f"{path}: truncated archive")
    (hlen,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: bad header: {exc}") from exc
    if header.get("version") != VERSION:
        raise LoadError(f"{path}: unsupported version {header.get('version')!r}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    offset = 8 + hlen
    for entry in header["entries"]:
        if entry.get("dtype") != "f32":
            raise LoadError(f"{path}: entry {entry.get('name')!r} has dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise LoadError(f"{path}: payload for {entry['name']!r} is truncated")
        out[entry["name"]] = np.frombuffer(chunk, dtype=_LE_F32).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise LoadError(f"{path}: {len(data) - offset} trailing bytes")
    return out


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def dump_json(obj: Any, path: str | Path) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: {exc}") from exc
