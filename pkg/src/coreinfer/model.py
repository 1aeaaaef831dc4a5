"""Decoder-only transformer runtime with dense and frozen-sparse FFN paths.

Two architectures are supported: ReLU FFN with layernorm and learned
positions (OPT-style), and gated-SiLU FFN with rmsnorm and rotary positions
(LLaMA-style). Pre-fill runs batched over the prompt; decoding runs one
token at a time against the KV cache. The sparse decode path executes only
the neurons named by a frozen per-layer plan: up-projection rows, gate rows
for gated models, and the matching down-projection columns.

A Model is immutable after load and may be shared across threads; each
KVCache belongs to a single generation session.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import kernels
from .bundle import (
    LAYERNORM,
    POS_LEARNED,
    POS_ROPE,
    RELU_FFN,
    SILU_GATED_FFN,
    BundleError,
    ModelConfig,
    expected_tensors,
    read_bundle,
)

__all__ = [
    "Model",
    "KVCache",
    "ActivationRecord",
    "PrefillResult",
    "DecodeStats",
    "PlanExecution",
    "load_model",
    "forward_prefill",
    "forward_decode_dense",
    "forward_decode_sparse",
    "ffn_multiplies",
]

_F32 = np.float32


def ffn_multiplies(config: ModelConfig, k: int) -> int:
    """Scalar multiplies one FFN pass spends on k active neurons."""
    per_projection = k * config.d_model
    n_projections = 3 if config.activation_kind == SILU_GATED_FFN else 2
    return n_projections * per_projection


@dataclass(frozen=True)
class ActivationRecord:
    """Post-nonlinearity FFN hidden vector for one token at one layer."""

    layer: int
    token_pos: int
    values: np.ndarray  # length d_ffn


@dataclass
class _LayerWeights:
    attn_norm_gain: np.ndarray
    attn_norm_bias: np.ndarray | None
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray | None
    bk: np.ndarray | None
    bv: np.ndarray | None
    bo: np.ndarray | None
    ffn_norm_gain: np.ndarray
    ffn_norm_bias: np.ndarray | None
    up: np.ndarray
    up_bias: np.ndarray | None
    gate: np.ndarray | None
    down: np.ndarray
    down_bias: np.ndarray | None


class Model:
    """Validated weights plus the derived rotary tables; read-only."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray], vocab: list[str] | None = None):
        config.validate()
        required, optional = expected_tensors(config)
        known = set(required) | set(optional)
        for name in tensors:
            if name not in known:
                raise BundleError(f"unexpected tensor {name}")
        for name, shape in required.items():
            if name not in tensors:
                raise BundleError(f"missing required tensor {name} (shape {shape})")

        def get(name: str) -> np.ndarray:
            t = np.ascontiguousarray(tensors[name], dtype=_F32)
            expect = required.get(name) or optional.get(name)
            if tuple(t.shape) != tuple(expect):
                raise BundleError(
                    f"tensor {name}: shape {tuple(t.shape)} != expected {expect}"
                )
            return t

        def maybe(name: str) -> np.ndarray | None:
            return get(name) if name in tensors else None

        self.config = config
        self.vocab = vocab
        self.tok_emb = get("embed.tokens")
        self.pos_emb = maybe("embed.positions")
        self.final_norm_gain = get("final_norm.gain")
        self.final_norm_bias = maybe("final_norm.bias")
        self.lm_head = get("lm_head")
        self.layers: list[_LayerWeights] = []
        for i in range(config.n_layers):
            p = f"layers.{i}"
            self.layers.append(
                _LayerWeights(
                    attn_norm_gain=get(f"{p}.attn_norm.gain"),
                    attn_norm_bias=maybe(f"{p}.attn_norm.bias"),
                    wq=get(f"{p}.attn.wq"),
                    wk=get(f"{p}.attn.wk"),
                    wv=get(f"{p}.attn.wv"),
                    wo=get(f"{p}.attn.wo"),
                    bq=maybe(f"{p}.attn.bq"),
                    bk=maybe(f"{p}.attn.bk"),
                    bv=maybe(f"{p}.attn.bv"),
                    bo=maybe(f"{p}.attn.bo"),
                    ffn_norm_gain=get(f"{p}.ffn_norm.gain"),
                    ffn_norm_bias=maybe(f"{p}.ffn_norm.bias"),
                    up=get(f"{p}.ffn.up"),
                    up_bias=maybe(f"{p}.ffn.up_bias"),
                    gate=maybe(f"{p}.ffn.gate"),
                    down=get(f"{p}.ffn.down"),
                    down_bias=maybe(f"{p}.ffn.down_bias"),
                )
            )
        if config.positions == POS_ROPE:
            half = config.head_dim // 2
            inv_freq = config.rope_theta ** (
                -np.arange(0, half, dtype=np.float64) * 2.0 / config.head_dim
            )
            angles = np.outer(np.arange(config.max_seq_len), inv_freq)
            emb = np.concatenate([angles, angles], axis=1)
            self.rope_cos = np.cos(emb).astype(_F32)
            self.rope_sin = np.sin(emb).astype(_F32)
        else:
            self.rope_cos = self.rope_sin = None

    def detokenize(self, token_ids: Sequence[int]) -> str:
        if self.vocab is None:
            raise ValueError("model loaded without a vocab; cannot detokenize")
        return "".join(self.vocab[int(t)] for t in token_ids)


def load_model(path) -> Model:
    config, tensors, vocab = read_bundle(path)
    return Model(config, tensors, vocab)


class KVCache:
    """Append-only per-layer key/value store for one generation session."""

    def __init__(self, config: ModelConfig):
        self.config = config
        shape = (config.max_seq_len, config.n_heads, config.head_dim)
        self.keys = [np.zeros(shape, dtype=_F32) for _ in range(config.n_layers)]
        self.values = [np.zeros(shape, dtype=_F32) for _ in range(config.n_layers)]
        self.current_len = 0

    def store(self, layer: int, pos: int, k: np.ndarray, v: np.ndarray) -> None:
        if pos < self.current_len:
            raise ValueError(f"KV cache is append-only: pos {pos} < len {self.current_len}")
        self.keys[layer][pos] = k
        self.values[layer][pos] = v


@dataclass
class DecodeStats:
    """Wall time and FFN multiply tallies accumulated over decode steps."""

    steps: int = 0
    step_seconds: float = 0.0
    ffn_seconds: float = 0.0
    ffn_multiplies_actual: int = 0
    ffn_multiplies_dense: int = 0


@dataclass
class PrefillResult:
    last_logits: np.ndarray
    kv: KVCache
    activations: dict[int, np.ndarray] | None  # layer -> [n_tokens, d_ffn]
    all_logits: np.ndarray | None = None

    def iter_records(self) -> Iterator[ActivationRecord]:
        if self.activations is None:
            return
        for layer in sorted(self.activations):
            block = self.activations[layer]
            for pos in range(block.shape[0]):
                yield ActivationRecord(layer, pos, block[pos])


def _norm_rows(x: np.ndarray, gain: np.ndarray, bias: np.ndarray | None, kind: str, eps: float) -> np.ndarray:
    if kind == LAYERNORM:
        mean = x.mean(axis=-1, keepdims=True)
        var = np.square(x - mean).mean(axis=-1, keepdims=True)
        return (x - mean) / np.sqrt(var + _F32(eps)) * gain + bias
    ms = np.square(x).mean(axis=-1, keepdims=True)
    return x / np.sqrt(ms + _F32(eps)) * gain


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _apply_rope(model: Model, q: np.ndarray, k: np.ndarray, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # q, k: [..., n_heads, head_dim]; cos/sin broadcast over the head axis.
    cos = model.rope_cos[positions][..., None, :]
    sin = model.rope_sin[positions][..., None, :]
    return q * cos + _rotate_half(q) * sin, k * cos + _rotate_half(k) * sin


def _check_token_ids(config: ModelConfig, token_ids: np.ndarray) -> None:
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= config.vocab_size):
        bad = int(token_ids.min() if token_ids.min() < 0 else token_ids.max())
        raise ValueError(f"unknown token id {bad} (vocab_size={config.vocab_size})")


def forward_prefill(model: Model, token_ids: Sequence[int], record: bool = False, all_logits: bool = False) -> PrefillResult:
    """Dense batched forward over the prompt, filling a fresh KV cache.

    With ``record`` set, the post-nonlinearity FFN hidden vector of every
    token at every layer is captured; recording never changes the logits.
    """
    cfg = model.config
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("prompt must be a nonempty 1-D token id sequence")
    if ids.size > cfg.max_seq_len:
        raise ValueError(f"prompt length {ids.size} exceeds max_seq_len {cfg.max_seq_len}")
    _check_token_ids(cfg, ids)

    m = ids.size
    positions = np.arange(m)
    x = model.tok_emb[ids].copy()
    if cfg.positions == POS_LEARNED:
        x += model.pos_emb[:m]
    kv = KVCache(cfg)
    records: dict[int, np.ndarray] | None = {} if record else None
    causal = np.where(
        np.arange(m)[None, :] > np.arange(m)[:, None], _F32(-np.inf), _F32(0.0)
    )
    scale = _F32(1.0 / math.sqrt(cfg.head_dim))

    for li, lw in enumerate(model.layers):
        a = _norm_rows(x, lw.attn_norm_gain, lw.attn_norm_bias, cfg.norm_kind, cfg.norm_eps)
        q = a @ lw.wq.T
        k = a @ lw.wk.T
        v = a @ lw.wv.T
        if lw.bq is not None:
            q, k, v = q + lw.bq, k + lw.bk, v + lw.bv
        q = q.reshape(m, cfg.n_heads, cfg.head_dim)
        k = k.reshape(m, cfg.n_heads, cfg.head_dim)
        v = v.reshape(m, cfg.n_heads, cfg.head_dim)
        if cfg.positions == POS_ROPE:
            q, k = _apply_rope(model, q, k, positions)
        kv.keys[li][:m] = k
        kv.values[li][:m] = v
        scores = np.einsum("mhd,nhd->hmn", q, k) * scale + causal
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hmn,nhd->mhd", weights, v).reshape(m, cfg.d_model)
        attn_out = ctx @ lw.wo.T
        if lw.bo is not None:
            attn_out += lw.bo
        x = x + attn_out

        f = _norm_rows(x, lw.ffn_norm_gain, lw.ffn_norm_bias, cfg.norm_kind, cfg.norm_eps)
        if cfg.activation_kind == RELU_FFN:
            hidden = f @ lw.up.T
            if lw.up_bias is not None:
                hidden += lw.up_bias
            hidden = np.maximum(hidden, _F32(0.0))
        else:
            gate = f @ lw.gate.T
            gate = gate / (_F32(1.0) + np.exp(-gate)) * (f @ lw.up.T)
            hidden = gate
        if records is not None:
            records[li] = hidden.copy()
        y = hidden @ lw.down.T
        if lw.down_bias is not None:
            y += lw.down_bias
        x = x + y

    kv.current_len = m
    x = _norm_rows(x, model.final_norm_gain, model.final_norm_bias, cfg.norm_kind, cfg.norm_eps)
    full = x @ model.lm_head.T if all_logits else None
    last = full[-1] if all_logits else x[-1] @ model.lm_head.T
    return PrefillResult(last_logits=last, kv=kv, activations=records, all_logits=full)


class _DenseFFN:
    """Full-width FFN for one layer on the decode path."""

    def __init__(self, cfg: ModelConfig, lw: _LayerWeights):
        self.cfg = cfg
        self.lw = lw
        self.k = cfg.d_ffn

    def __call__(self, f: np.ndarray) -> np.ndarray:
        lw = self.lw
        hidden = kernels.matvec(lw.up, f)
        if lw.up_bias is not None:
            hidden += lw.up_bias
        if self.cfg.activation_kind == RELU_FFN:
            hidden = np.maximum(hidden, _F32(0.0))
        else:
            hidden = kernels.silu(kernels.matvec(lw.gate, f)) * hidden
        y = kernels.matvec(lw.down, hidden)
        if lw.down_bias is not None:
            y = y + lw.down_bias
        return y


class _SlicedFFN:
    """FFN restricted to a frozen neuron subset; weights pre-sliced once.

    A full-coverage subset reuses the original weight arrays so the result
    is bit-identical to the dense path, not merely numerically close.
    """

    def __init__(self, cfg: ModelConfig, lw: _LayerWeights, neurons: np.ndarray):
        self.cfg = cfg
        self.lw = lw
        neurons = np.asarray(neurons, dtype=np.int64)
        if neurons.size and (neurons.min() < 0 or neurons.max() >= cfg.d_ffn):
            bad = int(neurons.min() if neurons.min() < 0 else neurons.max())
            raise ValueError(f"plan neuron index {bad} out of range (d_ffn={cfg.d_ffn})")
        if neurons.size != np.unique(neurons).size:
            raise ValueError("plan neuron set contains duplicates")
        self.k = int(neurons.size)
        if self.k == cfg.d_ffn:
            self.up, self.up_bias = lw.up, lw.up_bias
            self.gate, self.down = lw.gate, lw.down
        else:
            self.up = np.ascontiguousarray(lw.up[neurons])
            self.up_bias = lw.up_bias[neurons] if lw.up_bias is not None else None
            self.gate = np.ascontiguousarray(lw.gate[neurons]) if lw.gate is not None else None
            self.down = np.ascontiguousarray(lw.down[:, neurons])
        self.down_bias = lw.down_bias

    def __call__(self, f: np.ndarray) -> np.ndarray:
        if self.k == 0:
            # Empty core set: only the bias/residual path contributes.
            if self.down_bias is not None:
                return self.down_bias.copy()
            return np.zeros(self.cfg.d_model, dtype=_F32)
        hidden = kernels.matvec(self.up, f)
        if self.up_bias is not None:
            hidden += self.up_bias
        if self.cfg.activation_kind == RELU_FFN:
            hidden = np.maximum(hidden, _F32(0.0))
        else:
            hidden = kernels.silu(kernels.matvec(self.gate, f)) * hidden
        y = kernels.matvec(self.down, hidden)
        if self.down_bias is not None:
            y = y + self.down_bias
        return y


class PlanExecution:
    """Frozen sparse-plan executor: per-layer FFN callables plus accounting.

    Layers outside the plan's range run dense. Constructing the execution
    slices the planned weight rows/columns once so every decode step works
    on contiguous submatrices.
    """

    def __init__(self, model: Model, plan) -> None:
        cfg = model.config
        start, stop = plan.layer_range
        if not (0 <= start <= stop <= cfg.n_layers):
            raise ValueError(
                f"plan layer range [{start}, {stop}) exceeds model layers {cfg.n_layers}"
            )
        missing = [i for i in range(start, stop) if i not in plan.sets]
        if missing:
            raise ValueError(f"plan missing neuron sets for layers {missing}")
        self.model = model
        self.plan = plan
        self.ffns: list[_DenseFFN | _SlicedFFN] = []
        for i, lw in enumerate(model.layers):
            if start <= i < stop:
                neurons = plan.sets[i]
                if len(neurons) == 0:
                    warnings.warn(f"layer {i}: empty core set, FFN reduced to bias path")
                self.ffns.append(_SlicedFFN(cfg, lw, neurons))
            else:
                self.ffns.append(_DenseFFN(cfg, lw))

    def set_sizes(self) -> dict[int, int]:
        return {i: f.k for i, f in enumerate(self.ffns)}

    def multiplies_per_token(self) -> tuple[int, int]:
        cfg = self.model.config
        actual = sum(ffn_multiplies(cfg, f.k) for f in self.ffns)
        dense = cfg.n_layers * ffn_multiplies(cfg, cfg.d_ffn)
        return actual, dense


def _decode_step(model: Model, token_id: int, kv: KVCache, ffns: Sequence, stats: DecodeStats | None) -> np.ndarray:
    cfg = model.config
    pos = kv.current_len
    if pos < 1:
        raise ValueError("decode requires a pre-filled KV cache")
    if pos >= cfg.max_seq_len:
        raise ValueError(f"KV cache overflow: {pos} positions already at max_seq_len")
    token_id = int(token_id)
    _check_token_ids(cfg, np.asarray([token_id]))

    t_step = time.perf_counter()
    x = model.tok_emb[token_id].copy()
    if cfg.positions == POS_LEARNED:
        x += model.pos_emb[pos]
    scale = _F32(1.0 / math.sqrt(cfg.head_dim))
    ffn_seconds = 0.0

    for li, lw in enumerate(model.layers):
        if cfg.norm_kind == LAYERNORM:
            a = kernels.layernorm(x, lw.attn_norm_gain, lw.attn_norm_bias, cfg.norm_eps)
        else:
            a = kernels.rmsnorm(x, lw.attn_norm_gain, cfg.norm_eps)
        q = kernels.matvec(lw.wq, a)
        k = kernels.matvec(lw.wk, a)
        v = kernels.matvec(lw.wv, a)
        if lw.bq is not None:
            q, k, v = q + lw.bq, k + lw.bk, v + lw.bv
        q = q.reshape(cfg.n_heads, cfg.head_dim)
        k = k.reshape(cfg.n_heads, cfg.head_dim)
        v = v.reshape(cfg.n_heads, cfg.head_dim)
        if cfg.positions == POS_ROPE:
            q, k = _apply_rope(model, q, k, np.asarray(pos))
        kv.store(li, pos, k, v)
        keys = kv.keys[li][: pos + 1]
        vals = kv.values[li][: pos + 1]
        scores = np.einsum("hd,nhd->hn", q, keys) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hn,nhd->hd", weights, vals).reshape(cfg.d_model)
        attn_out = kernels.matvec(lw.wo, ctx)
        if lw.bo is not None:
            attn_out += lw.bo
        x = x + attn_out

        if cfg.norm_kind == LAYERNORM:
            f = kernels.layernorm(x, lw.ffn_norm_gain, lw.ffn_norm_bias, cfg.norm_eps)
        else:
            f = kernels.rmsnorm(x, lw.ffn_norm_gain, cfg.norm_eps)
        t_ffn = time.perf_counter()
        y = ffns[li](f)
        ffn_seconds += time.perf_counter() - t_ffn
        x = x + y

    kv.current_len = pos + 1
    if cfg.norm_kind == LAYERNORM:
        x = kernels.layernorm(x, model.final_norm_gain, model.final_norm_bias, cfg.norm_eps)
    else:
        x = kernels.rmsnorm(x, model.final_norm_gain, cfg.norm_eps)
    logits = kernels.matvec(model.lm_head, x)

    if stats is not None:
        stats.steps += 1
        stats.step_seconds += time.perf_counter() - t_step
        stats.ffn_seconds += ffn_seconds
        dense_per_layer = ffn_multiplies(cfg, cfg.d_ffn)
        stats.ffn_multiplies_actual += sum(
            ffn_multiplies(cfg, f.k) for f in ffns
        )
        stats.ffn_multiplies_dense += cfg.n_layers * dense_per_layer
    return logits


def forward_decode_dense(model: Model, token_id: int, kv: KVCache, stats: DecodeStats | None = None) -> np.ndarray:
    """One dense decode step; the baseline every sparse plan is judged against."""
    ffns = [_DenseFFN(model.config, lw) for lw in model.layers]
    return _decode_step(model, token_id, kv, ffns, stats)


def forward_decode_sparse(model: Model, token_id: int, kv: KVCache, plan, stats: DecodeStats | None = None) -> np.ndarray:
    """One decode step under a sparse plan.

    Convenience wrapper that slices per call; generation loops should build
    one PlanExecution up front and call :func:`decode_with_execution`.
    """
    return decode_with_execution(model, token_id, kv, PlanExecution(model, plan), stats)


def decode_with_execution(model: Model, token_id: int, kv: KVCache, execution: PlanExecution, stats: DecodeStats | None = None) -> np.ndarray:
    return _decode_step(model, token_id, kv, execution.ffns, stats)
