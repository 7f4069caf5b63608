"""Versioned binary container for dense numeric tables.

Layout::

    b"TWOCABIN"                 8-byte magic
    uint32 little-endian        format version
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON, sorted keys
    payload                     raw C-order array bytes, concatenated

The header holds ``kind``, free-form ``meta``, an array manifest
(name, dtype, shape, offset, nbytes) and the SHA-256 of the payload.
Nothing in the file depends on wall-clock time, so equal inputs give
byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TWOCABIN"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Unreadable or inconsistent container file."""


class ChecksumError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else canonical_json(p).encode())
    return h.hexdigest()


def write(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]):
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        manifest.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"kind": kind, "meta": meta, "arrays": manifest,
              "payload_sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = canonical_json(header).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def read(path, kind: str | None = None):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContainerError(f"{path}: not a container file")
    try:
        version, hlen = struct.unpack("<IQ", data[8:20])
        header = json.loads(data[20:20 + hlen].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header") from exc
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: holds {header.get('kind')!r}, expected {kind!r}")
    payload = data[20 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    arrays = {}
    for item in header["arrays"]:
        raw = payload[item["offset"]:item["offset"] + item["nbytes"]]
        arrays[item["name"]] = np.frombuffer(raw, dtype=np.dtype(item["dtype"])).reshape(item["shape"]).copy()
    return header["meta"], arrays
