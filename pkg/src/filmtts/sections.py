"""Binary container shared by record files and checkpoints.

Layout: 4-byte magic "DFTX", u32 version, u32 section count, then per
section a length-prefixed UTF-8 name and a length-prefixed payload.
Numeric arrays are stored little-endian with a small self-describing header.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DFTX"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<u4"): 1,
    np.dtype("u1"): 2,
    np.dtype("<f8"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ContainerError(ValueError):
    pass


def encode_array(arr):
    shape = np.asarray(arr).shape
    arr = np.ascontiguousarray(arr).reshape(shape)  # ascontiguousarray promotes 0-d to 1-d
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype in (np.int64, np.int32):
        if arr.size and arr.min() < 0:
            raise ContainerError("negative values cannot be stored as u32")
        arr = arr.astype("<u4")
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ContainerError(f"unsupported array dtype {arr.dtype}")
    arr = arr.astype(dt, copy=False)
    head = struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_array(payload, field):
    if len(payload) < 2:
        raise ContainerError(f"section '{field}': truncated array header")
    code, ndim = struct.unpack_from("<BB", payload, 0)
    if code not in _CODE_DTYPES:
        raise ContainerError(f"section '{field}': unknown dtype code {code}")
    off = 2 + 4 * ndim
    if len(payload) < off:
        raise ContainerError(f"section '{field}': truncated shape header")
    shape = struct.unpack_from(f"<{ndim}I", payload, 2)
    dt = _CODE_DTYPES[code]
    expect = int(np.prod(shape)) * dt.itemsize if ndim else dt.itemsize
    body = payload[off:]
    if len(body) != expect:
        raise ContainerError(f"section '{field}': expected {expect} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(shape).copy()


def write_container(path, sections):
    """`sections` is an ordered list of (name, payload_bytes)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(sections)))
        for name, payload in sections:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_container(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise ContainerError(f"{path}: file too short for header")
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: version {version} unsupported (expected {VERSION})")
    sections = {}
    off = 12
    for i in range(count):
        if off + 4 > len(blob):
            raise ContainerError(f"{path}: truncated at section {i} name length")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + nlen > len(blob):
            raise ContainerError(f"{path}: truncated at section {i} name")
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        if off + 8 > len(blob):
            raise ContainerError(f"{path}: truncated at section '{name}' payload length")
        (plen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        if off + plen > len(blob):
            raise ContainerError(f"{path}: truncated in section '{name}' payload")
        sections[name] = blob[off:off + plen]
        off += plen
    if off != len(blob):
        raise ContainerError(f"{path}: {len(blob) - off} trailing bytes after last section")
    return sections
