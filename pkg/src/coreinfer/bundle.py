"""CINF bundle: the on-disk model format the engine loads.

A bundle is a directory holding three files:

* ``config.json`` — the model architecture description (see ModelConfig).
* ``weights.cinf`` — flat binary tensor file. Layout: magic ``CINF``,
  u32 version (=1), u64 tensor count, then per tensor: u32 name length,
  UTF-8 name, u8 dtype (0 = float32 little-endian), u8 rank, u64 dims,
  raw data. The file ends with a CRC32 (u32 LE) of all preceding bytes.
* ``vocab.json`` — JSON array mapping token id to its detokenization
  string; the engine concatenates entries and never tokenizes.

Tensor names are fixed by ``expected_tensors``; loading validates presence,
shape, finiteness and the checksum, naming the offending tensor on failure.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ModelConfig",
    "BundleError",
    "RELU_FFN",
    "SILU_GATED_FFN",
    "expected_tensors",
    "write_weights",
    "read_weights",
    "write_bundle",
    "read_bundle",
]

MAGIC = b"CINF"
VERSION = 1
DTYPE_F32 = 0

RELU_FFN = "relu_ffn"
SILU_GATED_FFN = "silu_gated_ffn"
LAYERNORM = "layernorm"
RMSNORM = "rmsnorm"
POS_LEARNED = "learned"
POS_ROPE = "rope"


class BundleError(ValueError):
    """Malformed or inconsistent CINF bundle."""


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    d_ffn: int
    n_heads: int
    head_dim: int
    activation_kind: str  # relu_ffn | silu_gated_ffn
    norm_kind: str  # layernorm | rmsnorm
    vocab_size: int
    max_seq_len: int
    positions: str  # learned | rope
    norm_eps: float = 1e-5
    rope_theta: float = 10000.0

    def validate(self) -> "ModelConfig":
        if self.d_model != self.n_heads * self.head_dim:
            raise BundleError(
                f"d_model={self.d_model} != n_heads*head_dim="
                f"{self.n_heads}*{self.head_dim}"
            )
        if self.n_layers < 4:
            raise BundleError(
                f"n_layers={self.n_layers} < 4; similarity-guided plans need "
                "layers past index 3"
            )
        if self.d_ffn <= 0 or self.vocab_size <= 0 or self.max_seq_len <= 0:
            raise BundleError("d_ffn, vocab_size and max_seq_len must be positive")
        if self.activation_kind not in (RELU_FFN, SILU_GATED_FFN):
            raise BundleError(f"unknown activation_kind {self.activation_kind!r}")
        if self.norm_kind not in (LAYERNORM, RMSNORM):
            raise BundleError(f"unknown norm_kind {self.norm_kind!r}")
        if self.positions not in (POS_LEARNED, POS_ROPE):
            raise BundleError(f"unknown positions {self.positions!r}")
        return self

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise BundleError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw).validate()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def expected_tensors(config: ModelConfig) -> tuple[dict[str, tuple], dict[str, tuple]]:
    """(required, optional) tensor name -> shape maps for a config."""
    d, n, v = config.d_model, config.d_ffn, config.vocab_size
    required: dict[str, tuple] = {"embed.tokens": (v, d), "lm_head": (v, d)}
    optional: dict[str, tuple] = {}
    if config.positions == POS_LEARNED:
        required["embed.positions"] = (config.max_seq_len, d)
    required["final_norm.gain"] = (d,)
    if config.norm_kind == LAYERNORM:
        required["final_norm.bias"] = (d,)
    for i in range(config.n_layers):
        p = f"layers.{i}"
        required[f"{p}.attn_norm.gain"] = (d,)
        required[f"{p}.ffn_norm.gain"] = (d,)
        if config.norm_kind == LAYERNORM:
            required[f"{p}.attn_norm.bias"] = (d,)
            required[f"{p}.ffn_norm.bias"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            required[f"{p}.attn.{w}"] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            optional[f"{p}.attn.{b}"] = (d,)
        required[f"{p}.ffn.up"] = (n, d)
        required[f"{p}.ffn.down"] = (d, n)
        optional[f"{p}.ffn.up_bias"] = (n,)
        optional[f"{p}.ffn.down_bias"] = (d,)
        if config.activation_kind == SILU_GATED_FFN:
            required[f"{p}.ffn.gate"] = (n, d)
    return required, optional


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
            raw_name = name.encode("utf-8")
            emit(fh, struct.pack("<I", len(raw_name)))
            emit(fh, raw_name)
            emit(fh, struct.pack("<BB", DTYPE_F32, data.ndim))
            emit(fh, struct.pack(f"<{data.ndim}Q", *data.shape))
            emit(fh, data.tobytes())
        fh.write(struct.pack("<I", crc))


def read_weights(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 + 8 + 4:
        raise BundleError(f"{path}: truncated weights file")
    body, trailer = blob[:-4], blob[-4:]
    (stated_crc,) = struct.unpack("<I", trailer)
    if zlib.crc32(body) != stated_crc:
        raise BundleError(
            f"{path}: checksum failure (stored {stated_crc:#010x}, "
            f"computed {zlib.crc32(body):#010x})"
        )
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise BundleError(f"{path}: truncated while reading {what}")
        chunk = body[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise BundleError(f"{path}: bad magic, not a CINF file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise BundleError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<Q", take(8, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2, f"header of {name}"))
        if dtype != DTYPE_F32:
            raise BundleError(f"{path}: tensor {name}: unsupported dtype {dtype}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of {name}"))
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        data = np.frombuffer(take(n_bytes, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(dims).copy()
    if off != len(body):
        raise BundleError(f"{path}: {len(body) - off} trailing bytes after tensors")
    return tensors


def validate_tensors(config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    required, optional = expected_tensors(config)
    for name, shape in required.items():
        if name not in tensors:
            raise BundleError(f"missing required tensor {name} (shape {shape})")
    for name, tensor in tensors.items():
        if name in required:
            expect = required[name]
        elif name in optional:
            expect = optional[name]
        else:
            raise BundleError(f"unexpected tensor {name}")
        if tuple(tensor.shape) != tuple(expect):
            raise BundleError(
                f"tensor {name}: shape {tuple(tensor.shape)} != expected {expect}"
            )
        if not np.all(np.isfinite(tensor)):
            raise BundleError(f"tensor {name}: contains non-finite values")


def write_bundle(directory, config: ModelConfig, tensors: dict[str, np.ndarray], vocab: list[str]) -> Path:
    config.validate()
    validate_tensors(config, tensors)
    if len(vocab) != config.vocab_size:
        raise BundleError(f"vocab length {len(vocab)} != vocab_size {config.vocab_size}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(config.to_json(), encoding="utf-8")
    write_weights(directory / "weights.cinf", tensors)
    (directory / "vocab.json").write_text(
        json.dumps(vocab, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return directory


def read_bundle(directory) -> tuple[ModelConfig, dict[str, np.ndarray], list[str]]:
    directory = Path(directory)
    config_path = directory / "config.json"
    if not config_path.exists():
        raise BundleError(f"{directory}: no config.json; not a CINF bundle")
    config = ModelConfig.from_json(config_path.read_text(encoding="utf-8"))
    tensors = read_weights(directory / "weights.cinf")
    validate_tensors(config, tensors)
    vocab = json.loads((directory / "vocab.json").read_text(encoding="utf-8"))
    if not isinstance(vocab, list) or len(vocab) != config.vocab_size:
        raise BundleError(
            f"{directory}: vocab.json must be a {config.vocab_size}-entry array"
        )
    return config, tensors, vocab
