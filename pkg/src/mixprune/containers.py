"""Binary tensor container used by datasets, checkpoints and deploy files.

Layout (all little-endian):

    magic   4 bytes
    version u16
    mlen    u32                  length of the UTF-8 JSON manifest
    manifest                     JSON object; carries a "tensors" table
                                 mapping name -> {offset, dtype, shape, nbytes}
    blobs                        raw tensor bytes, concatenated in manifest order
    crc32   u32                  CRC-32 of every preceding byte

Tensor blobs are stored in '<' (little-endian) dtype order, C-contiguous.
Writing is deterministic: tensors are emitted in sorted name order.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

_HEADER = struct.Struct("<4sHI")


def write_container(path, magic: bytes, version: int, manifest: dict, tensors: dict) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    table = {}
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        table[name] = {
            "offset": len(payload),
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "nbytes": len(raw),
        }
        payload.extend(raw)
    doc = dict(manifest)
    doc["tensors"] = table
    mbytes = json.dumps(doc, sort_keys=True).encode("utf-8")
    body = _HEADER.pack(magic, version, len(mbytes)) + mbytes + bytes(payload)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def read_container(path, magic: bytes, max_version: int | None = None):
    """Return (version, manifest, tensors). Raises FormatError on any corruption."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise FormatError(f"{path}: truncated container")
    body, (crc_stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise FormatError(f"{path}: checksum mismatch")
    got_magic, version, mlen = _HEADER.unpack_from(body, 0)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if max_version is not None and version > max_version:
        raise FormatError(f"{path}: unsupported version {version}")
    mstart = _HEADER.size
    if mstart + mlen > len(body):
        raise FormatError(f"{path}: truncated manifest")
    manifest = json.loads(body[mstart:mstart + mlen].decode("utf-8"))
    blob = body[mstart + mlen:]
    tensors = {}
    for name, entry in manifest.get("tensors", {}).items():
        off, nbytes = entry["offset"], entry["nbytes"]
        if off + nbytes > len(blob):
            raise FormatError(f"{path}: truncated blob for tensor '{name}'")
        arr = np.frombuffer(blob[off:off + nbytes], dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        tensors[name] = arr.reshape(entry["shape"]).astype(entry["dtype"], copy=True)
    return version, manifest, tensors
