"""PCKPT checkpoint files: named float64 tensors in a flat binary layout.

    magic   b"PCKPT"
    u32 LE  format version (currently 1)
    u32 LE  tensor count
    per tensor:
        u32 LE        name length, then that many UTF-8 bytes
        u32 LE        rank, then one u32 LE extent per axis
        f64 LE        row-major data

Round trips are bitwise lossless. Loading into an existing parameter set
checks names and shapes and reports the first mismatch by name.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .binio import (
    BadMagicError,
    FileFormatError,
    FormatVersionError,
    TruncatedFileError,
    check_magic,
    read_exact,
    read_u32,
    write_u32,
)
from .tensor import ShapeError, Tensor

MAGIC = b"PCKPT"
VERSION = 1


def save_checkpoint(path, named) -> None:
    """Write a name -> Tensor (or ndarray) mapping to ``path``."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        write_u32(f, VERSION)
        write_u32(f, len(named))
        for name, t in named.items():
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
            encoded = name.encode("utf-8")
            write_u32(f, len(encoded))
            f.write(encoded)
            write_u32(f, arr.ndim)
            for extent in arr.shape:
                write_u32(f, extent)
            f.write(arr.tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint back into an ordered name -> float64 array map."""
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    with open(path, "rb") as f:
        check_magic(f, MAGIC, path)
        version = read_u32(f, "version")
        if version != VERSION:
            raise FormatVersionError(f"{path}: unsupported checkpoint version {version}")
        count = read_u32(f, "tensor count")
        for i in range(count):
            name_len = read_u32(f, f"name length of tensor {i}")
            name = read_exact(f, name_len, f"name of tensor {i}").decode("utf-8")
            rank = read_u32(f, f"rank of {name}")
            shape = tuple(read_u32(f, f"extent of {name}") for _ in range(rank))
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = read_exact(f, 8 * n, f"data of {name}")
            out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return out


def load_into(params, path) -> None:
    """Load a checkpoint into a ModelParams, matching names and shapes.

    Raises ShapeError naming the offending tensor on any dimension
    mismatch, and KeyError on missing or unexpected names.
    """
    loaded = load_checkpoint(path)
    missing = [n for n in params.named if n not in loaded]
    extra = [n for n in loaded if n not in params.named]
    if missing or extra:
        raise KeyError(f"{path}: checkpoint name mismatch, missing {missing}, unexpected {extra}")
    for name, t in params.named.items():
        arr = loaded[name]
        if arr.shape != t.data.shape:
            raise ShapeError(
                f"{path}: tensor {name!r} has shape {arr.shape}, model expects {t.data.shape}"
            )
    for name, t in params.named.items():
        t.data = loaded[name]
        t.grad = None


__all__ = [
    "MAGIC",
    "VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "load_into",
    "BadMagicError",
    "FormatVersionError",
    "TruncatedFileError",
    "FileFormatError",
]
