"""Shared helpers for the little-endian binary file formats."""

from __future__ import annotations

import struct


class FileFormatError(ValueError):
    """Base for malformed binary files."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class FormatVersionError(FileFormatError):
    """File has an unsupported format version."""


class TruncatedFileError(FileFormatError):
    """File ended before the payload it promised."""


def read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"unexpected end of file while reading {what} ({len(buf)}/{n} bytes)")
    return buf


def read_u32(f, what: str) -> int:
    return struct.unpack("<I", read_exact(f, 4, what))[0]


def write_u32(f, value: int) -> None:
    f.write(struct.pack("<I", value))


def check_magic(f, magic: bytes, path) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {got!r}")
