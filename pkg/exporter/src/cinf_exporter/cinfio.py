"""Writer (and verification reader) for the CINF bundle wire format.

The format is the exporter's contract with the inference engine, implemented
here from the format description rather than shared code:

* ``weights.cinf``: magic ``CINF``, u32 version=1, u64 tensor count, then per
  tensor u32 name length, UTF-8 name, u8 dtype (0 = f32 LE), u8 rank,
  u64 dims, raw little-endian data; CRC32 of all preceding bytes as trailer.
* ``config.json``: architecture keys (documented in the engine README).
* ``vocab.json``: JSON array, token id to detokenization string.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CINF"
VERSION = 1
DTYPE_F32 = 0


def write_weights(path, tensors: dict[str, np.ndarray]) -> None:
    crc = 0

    def emit(fh, chunk: bytes) -> None:
        nonlocal crc
        crc = zlib.crc32(chunk, crc)
        fh.write(chunk)

    with open(path, "wb") as fh:
        emit(fh, MAGIC)
        emit(fh, struct.pack("<I", VERSION))
        emit(fh, struct.pack("<Q", len(tensors)))
        for name, tensor in tensors.items():
            data = np.ascontiguousarray(tensor, dtype="<f4")
            raw = name.encode("utf-8")
            emit(fh, struct.pack("<I", len(raw)))
            emit(fh, raw)
            emit(fh, struct.pack("<BB", DTYPE_F32, data.ndim))
            emit(fh, struct.pack(f"<{data.ndim}Q", *data.shape))
            emit(fh, data.tobytes())
        fh.write(struct.pack("<I", crc))


def read_weights(path) -> dict[str, np.ndarray]:
    """Verification reader used by round-trip tests."""
    blob = Path(path).read_bytes()
    body, trailer = blob[:-4], blob[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise ValueError(f"{path}: checksum failure")
    if body[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", body[4:8])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<Q", body[8:16])
    off = 16
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", body[off : off + 4])
        off += 4
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        dtype, rank = struct.unpack("<BB", body[off : off + 2])
        off += 2
        if dtype != DTYPE_F32:
            raise ValueError(f"{path}: tensor {name}: unsupported dtype {dtype}")
        dims = struct.unpack(f"<{rank}Q", body[off : off + 8 * rank])
        off += 8 * rank
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        tensors[name] = (
            np.frombuffer(body[off : off + n_bytes], dtype="<f4").reshape(dims).copy()
        )
        off += n_bytes
    return tensors


def write_bundle(directory, config: dict, tensors: dict[str, np.ndarray], vocab: list[str]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_weights(directory / "weights.cinf", tensors)
    (directory / "vocab.json").write_text(
        json.dumps(vocab, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return directory
