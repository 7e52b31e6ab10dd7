"""Binary container shared by corpus and parameter files.

Layout::

    magic (ASCII) | u64 header length | header JSON (UTF-8)
    repeated: u64 byte length | little-endian float64 payload
    u32 CRC32 over every block (length prefixes included)

All integers are little-endian.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np


class ContainerError(Exception):
    """Base class for load failures."""


class HeaderError(ContainerError):
    pass


class PayloadError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")
_F64 = np.dtype("<f8")


def dump_bytes(magic: str, header: dict, blocks: list[np.ndarray]) -> bytes:
    head = dict(header)
    head["magic"] = magic
    head["blocks"] = [list(np.shape(b)) for b in blocks]
    head_bytes = json.dumps(head, sort_keys=True).encode("utf-8")
    payload = bytearray()
    for block in blocks:
        data = np.ascontiguousarray(block, dtype=_F64).tobytes()
        payload += _U64.pack(len(data))
        payload += data
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return magic.encode("ascii") + _U64.pack(len(head_bytes)) + head_bytes + bytes(payload) + _U32.pack(crc)


def write(path, magic: str, header: dict, blocks: list[np.ndarray]) -> None:
    Path(path).write_bytes(dump_bytes(magic, header, blocks))


def parse_bytes(raw: bytes, magic: str) -> tuple[dict, list[np.ndarray]]:
    m = magic.encode("ascii")
    if raw[: len(m)] != m:
        raise HeaderError(f"bad magic: expected {magic!r}")
    pos = len(m)
    if len(raw) < pos + _U64.size:
        raise HeaderError("file ends inside the header length")
    (head_len,) = _U64.unpack_from(raw, pos)
    pos += _U64.size
    if len(raw) < pos + head_len:
        raise HeaderError("file ends inside the header")
    try:
        header = json.loads(raw[pos : pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != magic or "blocks" not in header:
        raise HeaderError("header is missing required fields")
    pos += head_len

    payload_start = pos
    blocks = []
    for shape in header["blocks"]:
        expected = int(np.prod(shape, dtype=np.int64)) * _F64.itemsize
        if len(raw) < pos + _U64.size:
            raise PayloadError("truncated payload: missing block length")
        (n_bytes,) = _U64.unpack_from(raw, pos)
        pos += _U64.size
        if n_bytes != expected:
            raise PayloadError(f"block length {n_bytes} does not match shape {shape}")
        if len(raw) < pos + n_bytes:
            raise PayloadError("truncated payload: block cut short")
        blocks.append(np.frombuffer(raw, dtype=_F64, count=n_bytes // 8, offset=pos).reshape(shape).astype(np.float64))
        pos += n_bytes
    if len(raw) < pos + _U32.size:
        raise PayloadError("truncated payload: missing checksum")
    if len(raw) > pos + _U32.size:
        raise PayloadError("trailing bytes after checksum")
    (crc,) = _U32.unpack_from(raw, pos)
    if zlib.crc32(raw[payload_start:pos]) & 0xFFFFFFFF != crc:
        raise ChecksumError("payload checksum mismatch")
    return header, blocks


def read(path, magic: str) -> tuple[dict, list[np.ndarray]]:
    return parse_bytes(Path(path).read_bytes(), magic)
