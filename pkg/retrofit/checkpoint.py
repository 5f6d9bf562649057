"""
RFNT checkpoint files.

Layout (little-endian):

    b"RFNT" | u32 version | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 ndim | u32 dims... | u64 data offset
    data block: float64 values, tensors back to back

A JSON manifest with the same stem sits next to the binary file.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, MissingCheckpoint

MAGIC = b"RFNT"
VERSION = 1


def manifest_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], manifest: dict | None = None):
    """Write tensors (in the given order) and, if given, the JSON manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    table = bytearray()
    blobs = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", offset)
        blobs.append(arr.tobytes())
        offset += arr.nbytes

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(tensors)))
        f.write(table)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)

    if manifest is not None:
        with open(manifest_path(path), "w", encoding="utf-8") as f:
            json.dump({"format": "RFNT", "version": VERSION, **manifest}, f, indent=2)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise DataError(f"{path}: not an RFNT checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported RFNT version {version}")

    pos = 12
    entries = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            entries.append((name, shape, offset))
    except struct.error as e:
        raise DataError(f"{path}: truncated tensor table") from e

    tensors = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape, dtype=np.int64))
        start = pos + offset
        if start + 8 * n > len(data):
            raise DataError(f"{path}: tensor {name} runs past end of file")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=start).reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return tensors


def load_manifest(path: str | Path) -> dict:
    mpath = manifest_path(path)
    if not mpath.exists():
        raise MissingCheckpoint(f"checkpoint manifest not found: {mpath}")
    with open(mpath, encoding="utf-8") as f:
        return json.load(f)
