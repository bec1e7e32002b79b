"""Binary checkpoint container: JSON manifest plus raw little-endian float64 blobs.

Layout: magic "NLCK", uint32 format version, uint64 manifest length, manifest
JSON, then the blob section.  Offsets are relative to the blob section start
and must not overlap.  Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"NLCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path: str, tensors: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
        raw = arr.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": VERSION, "endianness": "little", "tensors": entries}).encode()

    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(manifest)))
            f.write(manifest)
            for raw in blobs:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint container")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode())
        if manifest.get("endianness") != "little":
            raise CheckpointError("unsupported endianness tag")
        blob = f.read()

    spans = []
    out = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = entry["nbytes"]
        expect = 8 * int(np.prod(shape)) if shape else 8
        if nbytes != expect:
            raise CheckpointError(f"tensor {entry['name']!r}: byte length {nbytes} != 8*prod{shape}")
        lo, hi = entry["offset"], entry["offset"] + nbytes
        for (a, b, other) in spans:
            if lo < b and a < hi:
                raise CheckpointError(f"tensors {entry['name']!r} and {other!r} overlap")
        spans.append((lo, hi, entry["name"]))
        if hi > len(blob):
            raise CheckpointError(f"tensor {entry['name']!r} extends past end of file")
        out[entry["name"]] = np.frombuffer(blob[lo:hi], dtype="<f8").reshape(shape).copy()
    return out
