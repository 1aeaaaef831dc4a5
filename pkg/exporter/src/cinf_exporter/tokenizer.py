"""Byte-level tokenization and the JSON-lines corpus writer.

Token id b is byte value b; the bundle's vocab maps it back to the one-byte
string via latin-1, so detokenization followed by latin-1 encoding is
byte-exact for any input and the identity for ASCII text.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

BYTE_VOCAB_SIZE = 256


def byte_vocab(vocab_size: int) -> list[str]:
    if vocab_size < BYTE_VOCAB_SIZE:
        raise ValueError(
            f"byte tokenizer needs vocab_size >= {BYTE_VOCAB_SIZE}, got {vocab_size}"
        )
    vocab = [bytes([b]).decode("latin-1") for b in range(BYTE_VOCAB_SIZE)]
    vocab += [f"<unused_{i}>" for i in range(vocab_size - BYTE_VOCAB_SIZE)]
    return vocab


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(token_ids, vocab: list[str]) -> str:
    return "".join(vocab[int(t)] for t in token_ids)


def tokenize_corpus(
    text_path,
    out_path,
    vocab_size: int,
    pair_text_path=None,
    labels_path=None,
) -> Path:
    """Write a JSON-lines token corpus from one text file per line.

    With ``pair_text_path`` and ``labels_path`` set, parallel lines become
    ``{"tokens_a", "tokens_b", "score"}`` pair records (labels pass through
    unchanged); otherwise each line becomes a ``{"tokens": ...}`` record.
    """
    lines = Path(text_path).read_text(encoding="utf-8").splitlines()
    if not lines:
        warnings.warn(f"{text_path}: empty file, writing an empty corpus")
    records = []
    if pair_text_path is not None or labels_path is not None:
        if pair_text_path is None or labels_path is None:
            raise ValueError("pair corpora need both --pair-text and --labels")
        other = Path(pair_text_path).read_text(encoding="utf-8").splitlines()
        labels = Path(labels_path).read_text(encoding="utf-8").splitlines()
        if not len(lines) == len(other) == len(labels):
            raise ValueError(
                f"row count mismatch: {len(lines)} text, {len(other)} pair, "
                f"{len(labels)} label lines"
            )
        for a, b, label in zip(lines, other, labels):
            ids_a, ids_b = encode(a), encode(b)
            _check_range(ids_a + ids_b, vocab_size)
            records.append(
                {"tokens_a": ids_a, "tokens_b": ids_b, "score": float(label)}
            )
    else:
        for line in lines:
            ids = encode(line)
            _check_range(ids, vocab_size)
            records.append({"tokens": ids})
    out_path = Path(out_path)
    with open(out_path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return out_path


def _check_range(ids: list[int], vocab_size: int) -> None:
    if ids and max(ids) >= vocab_size:
        raise ValueError(f"token id {max(ids)} overflows vocab_size {vocab_size}")
