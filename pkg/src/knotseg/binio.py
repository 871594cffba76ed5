"""Shared helpers for the KVOL / KCKP binary containers."""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import crcmod.predefined

# ECMA-182 polynomial, 8-byte little-endian trailer on every container
crc64 = crcmod.predefined.mkCrcFun("crc-64-we")
CRC_SIZE = 8


class FormatError(ValueError):
    """Malformed container."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def seal(payload: bytes) -> bytes:
    return payload + struct.pack("<Q", crc64(payload))


def unseal(blob: bytes, magic: bytes, versions: tuple[int, ...], kind: str) -> tuple[int, memoryview]:
    """Validate magic, version and CRC; return (version, body-after-version)."""
    if len(blob) < len(magic) or blob[: len(magic)] != magic:
        raise MagicError(f"not a {kind} file: expected magic {magic!r}, found {bytes(blob[:len(magic)])!r}")
    if len(blob) < len(magic) + 4 + CRC_SIZE:
        raise ChecksumError(f"{kind} file truncated ({len(blob)} bytes)")
    (version,) = struct.unpack_from("<I", blob, len(magic))
    if version not in versions:
        raise VersionError(f"{kind} version mismatch: found {version}, expected one of {list(versions)}")
    body, trailer = blob[:-CRC_SIZE], blob[-CRC_SIZE:]
    (stored,) = struct.unpack("<Q", trailer)
    if crc64(body) != stored:
        raise ChecksumError(f"{kind} checksum mismatch (file truncated or corrupted)")
    return version, memoryview(body)[len(magic) + 4:]


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Reader:
    """Little-endian cursor over a memoryview."""

    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def values(self, fmt: str) -> tuple:
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("unexpected end of data")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def unpack(self, fmt: str):
        (val,) = self.values(fmt)
        return val

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("unexpected end of data")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos
