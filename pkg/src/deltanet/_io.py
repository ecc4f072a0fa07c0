"""Deterministic binary container: magic, JSON header, raw little-endian arrays.

The header stores a SHA-256 of the array payload, checked on every read.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np


def write_container(path, magic: bytes, header: dict, arrays: dict) -> Path:
    path = Path(path)
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        blob = arr.astype(dt, copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    head = dict(header)
    head["arrays"] = entries
    head["payload_sha256"] = hashlib.sha256(b"".join(blobs)).hexdigest()
    hbytes = json.dumps(head, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)
    return path


def read_container(path, magic: bytes):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    raw = path.read_bytes()
    if raw[:len(magic)] != magic:
        raise ValueError(f"{path} is not a {magic.decode()} container")
    pos = len(magic)
    if len(raw) < pos + 8:
        raise ValueError(f"{path}: truncated container header")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen].decode())
    pos += hlen
    payload = raw[pos:]
    expected = header.pop("payload_sha256", None)
    total = sum(e["nbytes"] for e in header["arrays"])
    if len(payload) != total:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, header promises {total}")
    if expected is not None and hashlib.sha256(payload).hexdigest() != expected:
        raise ValueError(f"{path}: payload checksum mismatch (file is corrupt)")
    arrays = {}
    for e in header.pop("arrays"):
        start = pos + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header, arrays
