"""Seeded synthetic fixtures: tiny models, token corpora, activation streams.

The tiny model generator produces random but numerically tame weights. FFN
up-projection rows get a shuffled power-law scale so a minority of neurons
dominates the positive activations, which is the regime the core-set
machinery is built for. Everything is reproducible from the seed alone.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .bundle import (
    LAYERNORM,
    POS_LEARNED,
    POS_ROPE,
    RELU_FFN,
    RMSNORM,
    ModelConfig,
    write_bundle,
)
from .model import Model

__all__ = [
    "make_tiny_model",
    "make_bench_model",
    "write_model_bundle",
    "make_token_corpus",
    "make_topic_corpus",
    "make_drifting_stream",
    "make_blobs",
]


def _power_law_scales(rng: np.random.Generator, n: int, exponent: float = 0.6) -> np.ndarray:
    scales = (1.0 + np.arange(n)) ** -exponent
    scales /= math.sqrt(float(np.mean(scales**2)))
    rng.shuffle(scales)
    return scales.astype(np.float32)


def make_tiny_model(
    seed: int = 0,
    n_layers: int = 6,
    d_model: int = 64,
    n_heads: int = 4,
    d_ffn: int = 256,
    vocab_size: int = 320,
    max_seq_len: int = 512,
    activation_kind: str = RELU_FFN,
) -> Model:
    """Random desk-scale decoder. ReLU flavor is OPT-like (layernorm, learned
    positions, biases); SiLU flavor is LLaMA-like (rmsnorm, rope, no biases)."""
    relu = activation_kind == RELU_FFN
    config = ModelConfig(
        n_layers=n_layers,
        d_model=d_model,
        d_ffn=d_ffn,
        n_heads=n_heads,
        head_dim=d_model // n_heads,
        activation_kind=activation_kind,
        norm_kind=LAYERNORM if relu else RMSNORM,
        vocab_size=vocab_size,
        max_seq_len=max_seq_len,
        positions=POS_LEARNED if relu else POS_ROPE,
    ).validate()
    rng = np.random.default_rng(seed)

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    d, n = d_model, d_ffn
    attn_std = 0.5 / math.sqrt(d)
    tensors: dict[str, np.ndarray] = {
        "embed.tokens": normal((vocab_size, d), 1.0),
        "final_norm.gain": np.ones(d, dtype=np.float32),
        "lm_head": normal((vocab_size, d), 1.0 / math.sqrt(d)),
    }
    if config.positions == POS_LEARNED:
        tensors["embed.positions"] = normal((max_seq_len, d), 0.1)
    if config.norm_kind == LAYERNORM:
        tensors["final_norm.bias"] = np.zeros(d, dtype=np.float32)
    for i in range(n_layers):
        p = f"layers.{i}"
        tensors[f"{p}.attn_norm.gain"] = np.ones(d, dtype=np.float32)
        tensors[f"{p}.ffn_norm.gain"] = np.ones(d, dtype=np.float32)
        if config.norm_kind == LAYERNORM:
            tensors[f"{p}.attn_norm.bias"] = np.zeros(d, dtype=np.float32)
            tensors[f"{p}.ffn_norm.bias"] = np.zeros(d, dtype=np.float32)
        for w in ("wq", "wk", "wv", "wo"):
            tensors[f"{p}.attn.{w}"] = normal((d, d), attn_std)
        if relu:
            for b in ("bq", "bk", "bv", "bo"):
                tensors[f"{p}.attn.{b}"] = np.zeros(d, dtype=np.float32)
        up = normal((n, d), 1.0 / math.sqrt(d)) * _power_law_scales(rng, n)[:, None]
        tensors[f"{p}.ffn.up"] = up
        tensors[f"{p}.ffn.down"] = normal((d, n), 0.5 / math.sqrt(n))
        if relu:
            # Positive-mean bias keeps every neuron firing somewhere in any
            # desk-scale prompt, so full-fraction core sets really cover all
            # neurons instead of leaving pathological never-fired stragglers.
            tensors[f"{p}.ffn.up_bias"] = normal((n,), 0.05) + np.float32(0.15)
            tensors[f"{p}.ffn.down_bias"] = np.zeros(d, dtype=np.float32)
        else:
            tensors[f"{p}.ffn.gate"] = normal((n, d), 1.0 / math.sqrt(d))
    vocab = [f"[{i}]" for i in range(vocab_size)]
    return Model(config, tensors, vocab)


def make_bench_model(seed: int = 0, d_ffn: int = 4096, d_model: int = 512, n_layers: int = 4) -> Model:
    """Wider model for FFN wall-time measurements; still random weights."""
    return make_tiny_model(
        seed=seed,
        n_layers=n_layers,
        d_model=d_model,
        n_heads=8,
        d_ffn=d_ffn,
        vocab_size=512,
        max_seq_len=256,
    )


def _model_tensors(model: Model) -> dict[str, np.ndarray]:
    tensors = {
        "embed.tokens": model.tok_emb,
        "final_norm.gain": model.final_norm_gain,
        "lm_head": model.lm_head,
    }
    if model.pos_emb is not None:
        tensors["embed.positions"] = model.pos_emb
    if model.final_norm_bias is not None:
        tensors["final_norm.bias"] = model.final_norm_bias
    named = [
        ("attn_norm.gain", "attn_norm_gain"),
        ("attn_norm.bias", "attn_norm_bias"),
        ("attn.wq", "wq"),
        ("attn.wk", "wk"),
        ("attn.wv", "wv"),
        ("attn.wo", "wo"),
        ("attn.bq", "bq"),
        ("attn.bk", "bk"),
        ("attn.bv", "bv"),
        ("attn.bo", "bo"),
        ("ffn_norm.gain", "ffn_norm_gain"),
        ("ffn_norm.bias", "ffn_norm_bias"),
        ("ffn.up", "up"),
        ("ffn.up_bias", "up_bias"),
        ("ffn.gate", "gate"),
        ("ffn.down", "down"),
        ("ffn.down_bias", "down_bias"),
    ]
    for i, lw in enumerate(model.layers):
        for suffix, attr in named:
            value = getattr(lw, attr)
            if value is not None:
                tensors[f"layers.{i}.{suffix}"] = value
    return tensors


def write_model_bundle(model: Model, directory) -> Path:
    return write_bundle(directory, model.config, _model_tensors(model), model.vocab)


def make_token_corpus(
    seed: int,
    n_sequences: int,
    length: int,
    vocab_size: int,
    length_jitter: int = 0,
) -> list[np.ndarray]:
    """Zipf-weighted random token sequences."""
    rng = np.random.default_rng(seed)
    weights = (1.0 + np.arange(vocab_size)) ** -1.1
    weights /= weights.sum()
    out = []
    for _ in range(n_sequences):
        m = length + (int(rng.integers(0, length_jitter + 1)) if length_jitter else 0)
        out.append(rng.choice(vocab_size, size=m, p=weights).astype(np.int64))
    return out


def make_topic_corpus(
    seed: int,
    n_topics: int,
    per_topic: int,
    length: int,
    vocab_size: int,
) -> tuple[list[np.ndarray], list[str]]:
    """Sequences whose tokens come from disjoint per-topic vocabulary bands,
    so different topics activate visibly different neurons."""
    rng = np.random.default_rng(seed)
    band = vocab_size // n_topics
    sequences, topics = [], []
    for topic in range(n_topics):
        lo = topic * band
        for _ in range(per_topic):
            ids = rng.integers(lo, lo + band, size=length).astype(np.int64)
            sequences.append(ids)
            topics.append(f"topic{topic}")
    order = rng.permutation(len(sequences))
    return [sequences[i] for i in order], [topics[i] for i in order]


def make_drifting_stream(
    seed: int = 0,
    n_tokens: int = 300,
    n_neurons: int = 256,
    n_favorites: int = 52,
    n_drifters: int = 52,
    base_level: float = 3.0,
    drift_level: float = 6.0,
    drift_tau: float = 25.0,
    noise: float = 1.0,
) -> np.ndarray:
    """Activation stream whose dominant neurons drift early then freeze.

    A fixed favorite set keeps a high mean throughout; a disjoint drifter
    set starts even hotter and decays exponentially, mimicking a prompt
    whose core neurons stabilize as its meaning settles.
    """
    rng = np.random.default_rng(seed)
    picks = rng.permutation(n_neurons)
    favorites = picks[:n_favorites]
    drifters = picks[n_favorites : n_favorites + n_drifters]
    base = np.zeros(n_neurons, dtype=np.float64)
    base[favorites] = base_level
    drift = np.zeros(n_neurons, dtype=np.float64)
    drift[drifters] = drift_level
    rows = []
    for t in range(n_tokens):
        mu = base + drift * math.exp(-t / drift_tau)
        rows.append(mu + rng.normal(0.0, noise, size=n_neurons))
    return np.maximum(np.asarray(rows, dtype=np.float32), 0.0)


def make_blobs(
    seed: int,
    n_blobs: int,
    per_blob: int,
    dim: int,
    separation: float = 5.0,
    sigma: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian blobs with centers at least ``separation * sigma * sqrt(dim)``
    apart. Returns (points, labels, centers)."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(n_blobs, dim))
    if n_blobs > 1:
        dists = np.sqrt(
            np.square(centers[:, None, :] - centers[None, :, :]).sum(axis=2)
        )
        min_dist = dists[~np.eye(n_blobs, dtype=bool)].min()
        centers *= separation * sigma * math.sqrt(dim) / min_dist
    centers = np.abs(centers) + 1.0  # keep activation-like, nonnegative values
    points, labels = [], []
    for g in range(n_blobs):
        points.append(centers[g] + rng.normal(0.0, sigma, size=(per_blob, dim)))
        labels.extend([g] * per_blob)
    pts = np.maximum(np.concatenate(points), 0.0).astype(np.float32)
    return pts, np.asarray(labels, dtype=np.int64), centers.astype(np.float32)


def save_corpus_jsonl(path, sequences, topics=None, pairs=None) -> Path:
    """JSON-lines corpus: one ``{"tokens": [...]}`` record per sequence with
    optional topic labels, or ``{"tokens_a", "tokens_b", "score"}`` pairs."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        if pairs is not None:
            for a, b, score in pairs:
                fh.write(
                    json.dumps(
                        {
                            "tokens_a": [int(t) for t in a],
                            "tokens_b": [int(t) for t in b],
                            "score": float(score),
                        }
                    )
                    + "\n"
                )
        else:
            for i, seq in enumerate(sequences):
                record: dict = {"tokens": [int(t) for t in seq]}
                if topics is not None:
                    record["topic"] = topics[i]
                fh.write(json.dumps(record) + "\n")
    return path
