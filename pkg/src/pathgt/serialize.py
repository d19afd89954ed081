"""Binary tensor container used for checkpoints and spectral caches.

Layout: a 4-byte little-endian uint32 manifest length, the UTF-8 JSON
manifest, then raw little-endian tensor bytes. The manifest records name,
shape, dtype, byte offset, and a CRC32 per tensor; loads verify every
checksum. Tensors are written sorted by name so equal contents give equal
bytes.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f4", "<f8", "<i8"}


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}.get(arr.dtype.name)
        if code is None:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(code, copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": code,
            "offset": offset,
            "crc32": zlib.crc32(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated container")
    (mlen,) = struct.unpack("<I", raw[:4])
    if len(raw) < 4 + mlen:
        raise ValueError(f"{path}: manifest extends past end of file")
    manifest = json.loads(raw[4:4 + mlen].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {manifest.get('format_version')!r}")
    data = raw[4 + mlen:]
    tensors = {}
    for entry in manifest["tensors"]:
        code = entry["dtype"]
        if code not in _ALLOWED_DTYPES:
            raise ValueError(f"{path}: tensor {entry['name']!r} has unsupported dtype {code!r}")
        nbytes = int(np.prod(entry["shape"], dtype=np.int64)) * int(code[-1])
        chunk = data[entry["offset"]:entry["offset"] + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: tensor {entry['name']!r} extends past end of file")
        if zlib.crc32(chunk) != entry["crc32"]:
            raise ValueError(f"{path}: checksum mismatch for tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype=code).reshape(entry["shape"]).copy()
    return tensors, manifest["meta"]
