"""Named-tensor checkpoint files.

Layout: 8 magic bytes, a little-endian uint64 header length, a JSON header,
then the concatenated raw tensor payload. The header carries the format
version, free-form metadata, and a directory mapping each tensor name to
dtype, shape, and byte offset within the payload. The whole directory is
validated (bounds, contiguity, total length) before any tensor is
materialized, so a tampered file fails cleanly.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"NTCKPT\x00\x01"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def save_checkpoint(path, tensors, meta=None):
    """Write `tensors` (dict of name -> ndarray) atomically to `path`."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            arr = arr.astype("<f4", copy=False)
        elif arr.dtype == np.float64:
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype == np.int64:
            arr = arr.astype("<i8", copy=False)
        else:
            raise FormatError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries,
              "payload_bytes": offset}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors dict, meta dict)."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < len(MAGIC) + 8:
        raise FormatError(f"{path}: truncated checkpoint")
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    header_end = len(MAGIC) + 8 + header_len
    if header_end > len(blob):
        raise FormatError(f"{path}: header extends past end of file")
    try:
        header = json.loads(blob[len(MAGIC) + 8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = blob[header_end:]

    # validate the whole directory before touching any tensor
    expected_offset = 0
    names = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name in names:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        names.add(name)
        if entry["dtype"] not in _DTYPES:
            raise FormatError(f"{path}: unsupported dtype {entry['dtype']}")
        itemsize = _DTYPES[entry["dtype"]].itemsize
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        if entry["nbytes"] != count * itemsize:
            raise FormatError(f"{path}: tensor {name!r} byte count inconsistent with shape")
        if entry["offset"] != expected_offset:
            raise FormatError(f"{path}: tensor {name!r} offset {entry['offset']} is not contiguous")
        expected_offset += entry["nbytes"]
    if expected_offset != len(payload) or header.get("payload_bytes") != len(payload):
        raise FormatError(f"{path}: payload length {len(payload)} does not match directory")

    tensors = {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        start = entry["offset"]
        arr = np.frombuffer(payload[start:start + entry["nbytes"]], dtype=dt)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]
