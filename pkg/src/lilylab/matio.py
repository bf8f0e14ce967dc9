"""Matrix and checkpoint file formats.

CSV: one row per line, '.' decimal separator, no header, %.17g so float64
round-trips exactly.

Binary: magic ``LILYMAT1``, then rows and cols as 64-bit little-endian
unsigned integers, then row-major 64-bit little-endian IEEE-754 reals.

Checkpoint: one binary blob of concatenated matrix records plus a plain
text manifest (``name,rows,cols,offset`` per line, offset = byte offset
of the record's magic inside the blob).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .linalg import as_matrix

MAGIC = b"LILYMAT1"
_HEADER = struct.Struct("<8sQQ")

__all__ = [
    "save_csv", "load_csv",
    "matrix_to_bytes", "matrix_from_bytes",
    "save_matrix", "load_matrix",
    "save_checkpoint", "load_checkpoint",
]


def save_csv(path, m: np.ndarray) -> None:
    m = as_matrix(m)
    np.savetxt(path, m, fmt="%.17g", delimiter=",")


def load_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)


def matrix_to_bytes(m: np.ndarray) -> bytes:
    m = as_matrix(m)
    header = _HEADER.pack(MAGIC, m.shape[0], m.shape[1])
    return header + m.astype("<f8", copy=False).tobytes()


def matrix_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one matrix record; returns (matrix, offset past the record)."""
    magic, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r} at offset {offset}")
    start = offset + _HEADER.size
    end = start + rows * cols * 8
    data = np.frombuffer(buf[start:end], dtype="<f8").reshape(rows, cols)
    return np.ascontiguousarray(data, dtype=np.float64), end


def save_matrix(path, m: np.ndarray) -> None:
    Path(path).write_bytes(matrix_to_bytes(m))


def load_matrix(path) -> np.ndarray:
    m, _ = matrix_from_bytes(Path(path).read_bytes())
    return m


def save_checkpoint(blob_path, manifest_path, tensors: dict[str, np.ndarray]) -> None:
    """Write named matrices to a blob + manifest pair, in dict order."""
    records = []
    lines = []
    offset = 0
    for name, m in tensors.items():
        if "," in name or "\n" in name:
            raise ValueError(f"tensor name {name!r} not manifest-safe")
        rec = matrix_to_bytes(m)
        m2 = as_matrix(m)
        lines.append(f"{name},{m2.shape[0]},{m2.shape[1]},{offset}\n")
        records.append(rec)
        offset += len(rec)
    Path(blob_path).write_bytes(b"".join(records))
    Path(manifest_path).write_text("".join(lines))


def load_checkpoint(blob_path, manifest_path) -> dict[str, np.ndarray]:
    blob = Path(blob_path).read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for line in Path(manifest_path).read_text().splitlines():
        if not line.strip():
            continue
        name, rows, cols, offset = line.rsplit(",", 3)
        m, _ = matrix_from_bytes(blob, int(offset))
        if m.shape != (int(rows), int(cols)):
            raise ValueError(f"manifest shape mismatch for {name}")
        tensors[name] = m
    return tensors
