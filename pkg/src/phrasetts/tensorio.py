"""PPSW named-tensor container, used for model weights and mel files.

Layout (little-endian): magic ``PPSW``, version u32, tensor count u32, then
per tensor: name length u16, UTF-8 name, rank u8, dims u32 each, row-major
float32 data.  Mel files hold a single tensor ``mel`` [F, 80] followed by a
u32 trailer with the frame period in microseconds.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"PPSW"
VERSION = 1
MEL_FRAME_PERIOD_US = 12_500  # 12.5 ms hop
MEL_WINDOW_MS = 50.0
N_MELS = 80


def pack_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def unpack_tensors(data: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], int]:
    """Parse tensors; returns them with the offset where parsing stopped."""
    if data[:4] != MAGIC:
        raise FormatError(f"{source}: not a PPSW file")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"{source}: unsupported PPSW version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            if name in out:
                raise FormatError(f"{source}: duplicate tensor {name!r}")
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: truncated or corrupt PPSW data ({exc})") from None
    return out, off


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(pack_tensors(tensors))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    tensors, off = unpack_tensors(data, str(path))
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return tensors


def write_mel(path: str | Path, mel: np.ndarray, frame_period_us: int = MEL_FRAME_PERIOD_US) -> None:
    mel = np.asarray(mel, dtype=np.float32)
    if mel.ndim != 2 or mel.shape[1] != N_MELS or mel.shape[0] < 1:
        raise FormatError(f"mel must be [F>=1, {N_MELS}], got {mel.shape}")
    Path(path).write_bytes(pack_tensors({"mel": mel}) + struct.pack("<I", frame_period_us))


def read_mel(path: str | Path) -> tuple[np.ndarray, int]:
    """Returns (mel [F, 80], frame period in microseconds)."""
    data = Path(path).read_bytes()
    tensors, off = unpack_tensors(data, str(path))
    if set(tensors) != {"mel"}:
        raise FormatError(f"{path}: mel file must contain exactly one tensor named 'mel'")
    if len(data) - off != 4:
        raise FormatError(f"{path}: missing or malformed frame-period trailer")
    (period,) = struct.unpack_from("<I", data, off)
    mel = tensors["mel"]
    if mel.ndim != 2 or mel.shape[1] != N_MELS or mel.shape[0] < 1:
        raise FormatError(f"{path}: mel must be [F>=1, {N_MELS}], got {mel.shape}")
    return mel, period
