"""Checkpoint / sample-record serialization.

Layout: 8-byte magic, little-endian u64 header length, a JSON header, then a
single little-endian f32 blob. The header holds a `records` list of
{name, shape, dtype, offset, frozen} (offset in floats into the blob) plus an
optional free-form `meta` dict. The blob bytes are what freeze tests compare.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"BVLCKPT1"


def save_records(path, arrays, frozen=None, meta=None):
    """arrays: ordered {name: f32 ndarray}; frozen: {name: bool}."""
    frozen = frozen or {}
    records = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        records.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": offset,
            "frozen": bool(frozen.get(name, False)),
        })
        offset += arr.size
        blobs.append(arr.tobytes())
    header = json.dumps({"records": records, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_records(path):
    """Returns (arrays, frozen_flags, meta)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic in {path}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    arrays = {}
    frozen = {}
    for rec in header["records"]:
        n = int(np.prod(rec["shape"])) if rec["shape"] else 1
        start = rec["offset"] * 4
        arr = np.frombuffer(blob[start:start + 4 * n], dtype="<f4").reshape(rec["shape"])
        arrays[rec["name"]] = arr.copy()
        frozen[rec["name"]] = rec["frozen"]
    return arrays, frozen, header.get("meta", {})


def frozen_blob_bytes(path):
    """Concatenated raw bytes of all frozen records, for byte-level freeze checks."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic in {path}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    chunks = []
    for rec in header["records"]:
        if rec["frozen"]:
            n = int(np.prod(rec["shape"])) if rec["shape"] else 1
            start = rec["offset"] * 4
            chunks.append((rec["name"], blob[start:start + 4 * n]))
    return chunks


def save_store(path, store, meta=None, exclude=()):
    """Serialize a store; `exclude` drops records by name prefix so a stage
    checkpoint can carry only the parameter groups that stage owns."""
    keep = [p for p in store
            if not any(p.name.startswith(e) for e in exclude)]
    arrays = {p.name: p.data for p in keep}
    frozen = {p.name: p.frozen for p in keep}
    save_records(path, arrays, frozen=frozen, meta=meta)


def load_store(path, store, strict=True, restore_freeze=True):
    arrays, frozen, meta = load_records(path)
    if strict:
        missing = set(store.names()) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:5]}...")
    store.load_arrays(arrays, frozen_flags=frozen if restore_freeze else None)
    return meta
