"""Versioned binary weight container.

Layout (all integers little-endian):

    bytes 0..3    magic ``BFTW``
    bytes 4..7    uint32 format version (currently 1)
    bytes 8..15   uint64 manifest length in bytes
    manifest      UTF-8 JSON (sorted keys, no whitespace)
    payload       raw tensor bytes, C-order, at the offsets the manifest declares

The manifest carries ``sections`` (structured descriptions: backbone layer
graph, ranking/mapping heads, quantized twin, fixtures), ``tensors``
(name -> shape/dtype/offset/nbytes) and free-form ``meta``. Writers emit
tensors in sorted-name order so container bytes are deterministic.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

MAGIC = b"BFTW"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<f4", "<i1", "<i4", "<i8"}

_HEADER = struct.Struct("<4sIQ")


def write_container(sections: dict, tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialize sections + named tensors into container bytes."""
    entries = {}
    payload_parts = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = arr.dtype.newbyteorder("<")
        dstr = dtype.str
        if dstr not in _ALLOWED_DTYPES:
            raise DataError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(dtype, copy=False).tobytes(order="C")
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": dstr,
            "offset": offset,
            "nbytes": len(raw),
        }
        payload_parts.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "sections": sections,
        "tensors": entries,
        "meta": meta or {},
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest_bytes))
    return header + manifest_bytes + b"".join(payload_parts)


def read_container(blob: bytes) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Parse container bytes into (sections, tensors, meta), validating as it goes."""
    if len(blob) < _HEADER.size:
        raise DataError("container too short for header")
    magic, version, manifest_len = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported container version {version}")
    manifest_end = _HEADER.size + manifest_len
    if len(blob) < manifest_end:
        raise DataError("container truncated inside manifest")
    try:
        manifest = json.loads(blob[_HEADER.size : manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"manifest is not valid JSON: {exc}") from exc
    for key in ("sections", "tensors", "meta"):
        if key not in manifest:
            raise DataError(f"manifest missing {key!r}")
    payload = blob[manifest_end:]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in manifest["tensors"].items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            dtype = entry["dtype"]
            offset = int(entry["offset"])
            nbytes = int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed tensor entry {name!r}: {exc}") from exc
        if dtype not in _ALLOWED_DTYPES:
            raise DataError(f"tensor {name!r} has unsupported dtype {dtype}")
        if offset < 0 or offset + nbytes > len(payload):
            raise DataError(f"tensor {name!r} payload missing or truncated")
        arr = np.frombuffer(payload, dtype=np.dtype(dtype), count=nbytes // np.dtype(dtype).itemsize, offset=offset)
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise DataError(f"tensor {name!r} has {arr.size} elements, manifest says {expected}")
        arr = arr.reshape(shape).copy()
        if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
            raise DataError(f"tensor {name!r} contains non-finite values")
        tensors[name] = arr
    return manifest["sections"], tensors, manifest["meta"]


def read_container_file(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read container {path}: {exc}") from exc
    return read_container(blob)


def write_container_file(path, sections: dict, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    blob = write_container(sections, tensors, meta)
    with open(path, "wb") as fh:
        fh.write(blob)
