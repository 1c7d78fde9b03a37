"""Flat binary container for tensors, and the manifest-wrapped checkpoint file.

Single-tensor container layout (all integers little-endian unsigned 64-bit):

    magic  b"RVT1"
    rank   u64
    extent u64 * rank
    data   f64 * product(extents), little-endian, row-major

A checkpoint wraps named containers behind a plain-text manifest so the file
is self-describing:

    magic        b"RVCK"
    manifest_len u64
    manifest     UTF-8 "key = value" lines
    n_tensors    u64
    [name_len u64, name UTF-8, RVT1 container] * n_tensors
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

__all__ = [
    "TENSOR_MAGIC",
    "CHECKPOINT_MAGIC",
    "write_tensor",
    "read_tensor",
    "save_checkpoint",
    "load_checkpoint",
]

TENSOR_MAGIC = b"RVT1"
CHECKPOINT_MAGIC = b"RVCK"


def write_tensor(f: BinaryIO, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<Q", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.astype("<f8", copy=False).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated tensor container: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack("<Q", _read_exact(f, 8))
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank)) if rank else ()
    count = 1
    for extent in shape:
        count *= extent
    data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").astype(np.float64)
    return data.reshape(shape)


def _format_manifest(manifest: dict[str, str]) -> bytes:
    lines = [f"{k} = {v}" for k, v in manifest.items()]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_manifest(blob: bytes) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in blob.decode("utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path: str | Path, manifest: dict[str, str],
                    tensors: dict[str, np.ndarray]) -> None:
    blob = _format_manifest(manifest)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            write_tensor(f, arr)


def load_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (mlen,) = struct.unpack("<Q", _read_exact(f, 8))
        manifest = _parse_manifest(_read_exact(f, mlen))
        (count,) = struct.unpack("<Q", _read_exact(f, 8))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<Q", _read_exact(f, 8))
            name = _read_exact(f, nlen).decode("utf-8")
            tensors[name] = read_tensor(f)
    return manifest, tensors
