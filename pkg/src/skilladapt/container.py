"""Single-file array container shared by datasets and checkpoints.

Layout (all integers little-endian)::

    b"SKADAPT1"                       8-byte magic
    u64 header_length
    header_length bytes               UTF-8 JSON, sorted keys
    for each entry of header["arrays"], in order:
        u64 byte_length
        byte_length bytes             raw little-endian array data, C order

Every array is described in the header by ``{"name", "dtype", "shape"}``.
Supported dtypes are ``<f4``, ``<f8``, ``<i8`` and ``|u1``.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SKADAPT1"
DTYPES = ("<f4", "<f8", "<i8", "|u1")


class ContainerError(ValueError):
    pass


def _canonical_dtype(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        return "<f8" if arr.dtype.itemsize == 8 else "<f4"
    if kind == "u" and arr.dtype.itemsize == 1:
        return "|u1"
    if kind in "iub":
        return "<i8"
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def dumps(header: dict, arrays: dict) -> bytes:
    header = dict(header)
    specs, blobs = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = _canonical_dtype(arr)
        data = np.ascontiguousarray(arr, dtype=np.dtype(dtype))
        specs.append({"name": name, "dtype": dtype, "shape": list(data.shape)})
        blobs.append(data.tobytes(order="C"))
    header["arrays"] = specs
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<Q", len(head)))
    out.write(head)
    for blob in blobs:
        out.write(struct.pack("<Q", len(blob)))
        out.write(blob)
    return out.getvalue()


def loads(raw: bytes) -> tuple[dict, dict]:
    if raw[:8] != MAGIC or len(raw) < 16:
        raise ContainerError("not a container file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    pos = 16 + hlen
    if pos > len(raw):
        raise ContainerError("header is truncated")
    header = json.loads(raw[16:pos].decode("utf-8"))
    arrays = {}
    for spec in header.get("arrays", []):
        if spec["dtype"] not in DTYPES:
            raise ContainerError(f"unsupported dtype {spec['dtype']}")
        if pos + 8 > len(raw):
            raise ContainerError(f"array {spec['name']!r} is missing")
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if n != expected or pos + n > len(raw):
            raise ContainerError(f"array {spec['name']!r} is truncated or mis-sized")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dtype, count=n // dtype.itemsize,
                                             offset=pos).reshape(shape).copy()
        pos += n
    if pos != len(raw):
        raise ContainerError("trailing bytes after last array")
    return header, arrays


def write(path, header: dict, arrays: dict) -> str:
    """Write atomically and return the sha256 of the file contents."""
    raw = dumps(header, arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(raw)
    os.replace(tmp, path)
    return hashlib.sha256(raw).hexdigest()


def read(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
