"""Single-file binary container: magic, version, JSON header, payload.

Layout: 4 magic bytes, uint32 version, uint32 header length, UTF-8 JSON
header, raw payload. The header carries the payload's sha256 so tampering
is detected on read. Everything is little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

from .errors import ChecksumError, FormatError, TruncatedPayloadError, VersionError

_PREFIX = struct.Struct("<4sII")


def write_container(path, magic: bytes, version: int, header: dict, payload: bytes) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    header = dict(header)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def read_container(path, magic: bytes, version: int) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FormatError(f"{path}: too short to hold a container prefix")
    got_magic, got_version, header_len = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic bytes {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise VersionError(
            f"{path}: format version {got_version} unsupported (reader supports {version})"
        )
    header_end = _PREFIX.size + header_len
    if len(data) < header_end:
        raise TruncatedPayloadError(f"{path}: header truncated")
    try:
        header = json.loads(data[_PREFIX.size : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON: {exc}") from exc
    payload = data[header_end:]
    expected = header.get("payload_bytes")
    if expected is not None and len(payload) != expected:
        raise TruncatedPayloadError(f"{path}: payload holds {len(payload)} bytes, expected {expected}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise ChecksumError(f"{path}: payload does not match its checksum")
    return header, payload
