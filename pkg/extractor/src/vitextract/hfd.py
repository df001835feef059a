"""Standalone HFD1 container writer/reader.

Implements the published format contract: ``HFD1`` magic, uint32-le header
length, canonical UTF-8 JSON header (tensor name, dtype f32/u8, shape, byte
offset/length relative to the end of the header), then raw little-endian
row-major payloads. Kept independent of the consumer engine on purpose; the
interface between the two packages is this byte layout, nothing else.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"HFD1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class HfdError(Exception):
    pass


def encode(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
            dtype = "f32"
        elif arr.dtype.kind in "iub":
            arr = arr.astype("u1")
            dtype = "u8"
        else:
            raise HfdError(f"unsupported dtype for tensor {name!r}: {arr.dtype}")
        blob = arr.tobytes(order="C")
        entries.append(
            {"dtype": dtype, "length": len(blob), "name": name, "offset": offset,
             "shape": list(arr.shape)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def write_atomic(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Serialize and rename into place so partial files never exist."""
    data = encode(tensors, meta)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_meta(path) -> dict:
    """Decode only the header's meta block (cheap skip-checks)."""
    with open(path, "rb") as fh:
        preamble = fh.read(8)
        if len(preamble) < 8 or preamble[:4] != MAGIC:
            raise HfdError(f"{path}: not an HFD1 file")
        (header_len,) = struct.unpack("<I", preamble[4:])
        header = fh.read(header_len)
    if len(header) < header_len:
        raise HfdError(f"{path}: truncated header")
    try:
        return json.loads(header.decode("utf-8"))["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise HfdError(f"{path}: malformed header") from exc


def read(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise HfdError(f"{path}: not an HFD1 file")
    (header_len,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HfdError(f"{path}: malformed header") from exc
    payload = data[8 + header_len :]
    out = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        lo = entry["offset"]
        hi = lo + entry["length"]
        if hi > len(payload):
            raise HfdError(f"{path}: tensor {entry['name']!r} past EOF")
        out[entry["name"]] = np.frombuffer(payload[lo:hi], dtype=dtype).reshape(shape)
    return out, header["meta"]
