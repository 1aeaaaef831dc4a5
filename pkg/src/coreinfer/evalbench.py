"""Desk-scale measurements: perplexity, ratio sweeps, rank correlation, timing.

Plan-mode perplexity mirrors the prefill/decode split without generating:
the first half of each sequence acts as the prompt that fixes the plan, and
the second half is scored by teacher-forced sparse decoding. The benchmark
reports medians over repeated runs and computes FLOP ratios analytically
from the frozen set sizes, never from timings.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as sstats

from . import core
from .engine import GenerationConfig, prefill_and_extract
from .model import (
    DecodeStats,
    Model,
    PlanExecution,
    decode_with_execution,
    forward_decode_dense,
    forward_prefill,
)
from .predict import default_reference_layer, predict_stability

__all__ = [
    "EvalCorpus",
    "load_corpus",
    "SweepResult",
    "SpearmanResult",
    "BenchRow",
    "perplexity",
    "sweep",
    "spearman_core_vs_semantic",
    "bench_decode",
]


@dataclass
class EvalCorpus:
    """Pre-tokenized sequences, or labelled pairs for similarity scoring."""

    name: str
    sequences: list[np.ndarray] = field(default_factory=list)
    topics: list[str] | None = None
    pairs: list[tuple[np.ndarray, np.ndarray, float]] = field(default_factory=list)

    def validate(self) -> "EvalCorpus":
        if not self.sequences and not self.pairs:
            raise ValueError(f"corpus {self.name!r} is empty")
        for seq in self.sequences:
            if len(seq) == 0:
                raise ValueError(f"corpus {self.name!r} contains an empty sequence")
        if self.topics is not None and len(self.topics) != len(self.sequences):
            raise ValueError("topic labels not aligned with sequences")
        for _, _, score in self.pairs:
            if not 0.0 <= score <= 5.0:
                raise ValueError(f"pair similarity label {score} outside [0, 5]")
        return self


def load_corpus(path, name: str | None = None) -> EvalCorpus:
    """Read the JSON-lines corpus format: ``{"tokens": [...], "topic"?: str}``
    records or ``{"tokens_a": [...], "tokens_b": [...], "score": float}`` pairs."""
    path = Path(path)
    corpus = EvalCorpus(name or path.stem)
    topics: list[str] = []
    saw_topic = False
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "tokens_a" in record:
                corpus.pairs.append(
                    (
                        np.asarray(record["tokens_a"], dtype=np.int64),
                        np.asarray(record["tokens_b"], dtype=np.int64),
                        float(record["score"]),
                    )
                )
            elif "tokens" in record:
                corpus.sequences.append(np.asarray(record["tokens"], dtype=np.int64))
                if "topic" in record:
                    saw_topic = True
                    topics.append(str(record["topic"]))
                elif saw_topic:
                    raise ValueError(f"{path}:{line_no}: missing topic on labelled corpus")
            else:
                raise ValueError(f"{path}:{line_no}: record has neither tokens nor tokens_a")
    if saw_topic:
        corpus.topics = topics
    return corpus.validate()


def _nll_of(logits: np.ndarray, target: int) -> float:
    shifted = logits.astype(np.float64) - float(logits.max())
    return float(np.log(np.exp(shifted).sum()) - shifted[target])


@dataclass
class _PplDetail:
    ppl: float
    mean_set_size: float
    flop_ratio: float


def _perplexity_detail(model: Model, corpus: EvalCorpus, mode: str, cfg: GenerationConfig) -> _PplDetail:
    if mode not in ("dense", "plan"):
        raise ValueError(f"perplexity mode must be dense|plan, got {mode!r}")
    if not corpus.sequences:
        raise ValueError("perplexity needs a sequence corpus")
    total_nll, total_tokens = 0.0, 0
    sizes: list[int] = []
    mult_actual = mult_dense = 0
    for seq in corpus.sequences:
        m = len(seq)
        if m < 2:
            raise ValueError("perplexity requires sequences of at least 2 tokens")
        half = math.ceil(m / 2)
        if mode == "dense":
            res = forward_prefill(model, seq, all_logits=True)
            for t in range(half, m):
                total_nll += _nll_of(res.all_logits[t - 1], int(seq[t]))
                total_tokens += 1
        else:
            ext = prefill_and_extract(model, seq[:half], cfg)
            plan = predict_stability(ext.sentence_sets, model.config.n_layers)
            execution = PlanExecution(model, plan)
            sizes.extend(execution.set_sizes().values())
            stats = DecodeStats()
            logits = ext.last_logits
            total_nll += _nll_of(logits, int(seq[half]))
            total_tokens += 1
            for t in range(half, m - 1):
                logits = decode_with_execution(model, int(seq[t]), ext.kv, execution, stats)
                total_nll += _nll_of(logits, int(seq[t + 1]))
                total_tokens += 1
            mult_actual += stats.ffn_multiplies_actual
            mult_dense += stats.ffn_multiplies_dense
    ppl = math.exp(total_nll / total_tokens)
    mean_size = float(np.mean(sizes)) if sizes else float(model.config.d_ffn)
    ratio = (mult_actual / mult_dense) if mult_dense else 1.0
    return _PplDetail(ppl, mean_size, ratio)


def perplexity(model: Model, corpus: EvalCorpus, mode: str = "dense", cfg: GenerationConfig | None = None) -> float:
    """exp(mean next-token NLL) over the second half of every sequence."""
    return _perplexity_detail(model, corpus, mode, cfg or GenerationConfig()).ppl


@dataclass
class SweepResult:
    rows: list[dict]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["alpha", "beta", "ppl", "mean_set_size", "flop_ratio"])
            for row in self.rows:
                writer.writerow(
                    [
                        repr(row["alpha"]),
                        repr(row["beta"]),
                        repr(row["ppl"]),
                        repr(row["mean_set_size"]),
                        repr(row["flop_ratio"]),
                    ]
                )
        return path


def sweep(model: Model, corpus: EvalCorpus, alphas: Sequence[float], betas: Sequence[float], cfg: GenerationConfig | None = None) -> SweepResult:
    """Full factorial plan-mode evaluation over the ratio grids."""
    if not alphas or not betas:
        raise ValueError("sweep needs nonempty alpha and beta grids")
    base = cfg or GenerationConfig()
    rows = []
    for alpha in alphas:
        for beta in betas:
            cell_cfg = GenerationConfig(
                alpha=alpha,
                beta=beta,
                tau_stability=base.tau_stability,
                reference_layer=base.reference_layer,
            )
            detail = _perplexity_detail(model, corpus, "plan", cell_cfg)
            rows.append(
                {
                    "alpha": float(alpha),
                    "beta": float(beta),
                    "ppl": detail.ppl,
                    "mean_set_size": detail.mean_set_size,
                    "flop_ratio": detail.flop_ratio,
                }
            )
    return SweepResult(rows)


@dataclass
class SpearmanResult:
    rho: float
    pvalue: float
    n_pairs: int


def _sentence_core_at(model: Model, seq: np.ndarray, alpha: float, beta: float, layer: int) -> core.SentenceCoreSet:
    res = forward_prefill(model, seq, record=True)
    block = res.activations[layer]
    token_sets = [
        core.token_core(block[t], alpha, layer=layer, token_pos=t) for t in range(block.shape[0])
    ]
    freq = core.frequency_counts(token_sets, model.config.d_ffn, layer=layer)
    return core.sentence_core(freq, beta, alpha=alpha)


def spearman_core_vs_semantic(
    model: Model,
    corpus: EvalCorpus,
    alpha: float,
    beta: float,
    reference_layer: int | None = None,
) -> SpearmanResult:
    """Rank correlation between reference-layer core-set overlap and labels."""
    if len(corpus.pairs) < 10:
        raise ValueError(f"need >= 10 labelled pairs, got {len(corpus.pairs)}")
    layer = (
        reference_layer
        if reference_layer is not None
        else default_reference_layer(model.config.n_layers)
    )
    sims, labels = [], []
    for a, b, score in corpus.pairs:
        set_a = _sentence_core_at(model, a, alpha, beta, layer)
        set_b = _sentence_core_at(model, b, alpha, beta, layer)
        sims.append(core.core_similarity(set_a, set_b))
        labels.append(score)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # constant input becomes the error below
        rho, pvalue = sstats.spearmanr(sims, labels)
    if math.isnan(rho):
        raise ValueError("Spearman undefined: one of the rank vectors is constant")
    return SpearmanResult(float(rho), float(pvalue), len(corpus.pairs))


@dataclass
class BenchRow:
    config: str
    tokens_per_s: float
    ffn_share: float
    flop_ratio: float
    ffn_seconds: float
    decode_seconds: float
    runs: int


def _timed_decode(model: Model, prompt_ids, beta: float | None, alpha: float, max_new_tokens: int) -> tuple[DecodeStats, float]:
    cfg = GenerationConfig(alpha=alpha, beta=beta if beta is not None else 1.0)
    execution = None
    if beta is not None:
        ext = prefill_and_extract(model, prompt_ids, cfg)
        kv = ext.kv
        logits = ext.last_logits
        execution = PlanExecution(model, predict_stability(ext.sentence_sets, model.config.n_layers))
    else:
        res = forward_prefill(model, prompt_ids)
        kv, logits = res.kv, res.last_logits
    stats = DecodeStats()
    t0 = time.perf_counter()
    for _ in range(max_new_tokens):
        token = int(np.argmax(logits))
        if execution is None:
            logits = forward_decode_dense(model, token, kv, stats)
        else:
            logits = decode_with_execution(model, token, kv, execution, stats)
    elapsed = time.perf_counter() - t0
    return stats, elapsed


def bench_decode(
    model: Model,
    prompt_ids,
    betas: Sequence[float],
    alpha: float = 0.4,
    runs: int = 5,
    warmup: int = 1,
    max_new_tokens: int = 32,
) -> list[BenchRow]:
    """Median decode throughput for the dense arm and each sparse ratio."""
    if runs < 1:
        raise ValueError("bench needs at least one measured run")
    arms: list[tuple[str, float | None]] = [("dense", None)]
    arms += [(f"beta={beta:g}", float(beta)) for beta in betas]
    out = []
    for label, beta in arms:
        for _ in range(warmup):
            _timed_decode(model, prompt_ids, beta, alpha, max_new_tokens)
        samples = [
            _timed_decode(model, prompt_ids, beta, alpha, max_new_tokens)
            for _ in range(runs)
        ]
        decode_s = statistics.median(s[1] for s in samples)
        ffn_s = statistics.median(s[0].ffn_seconds for s in samples)
        step_s = statistics.median(s[0].step_seconds for s in samples)
        stats = samples[0][0]
        ratio = stats.ffn_multiplies_actual / stats.ffn_multiplies_dense
        out.append(
            BenchRow(
                config=label,
                tokens_per_s=max_new_tokens / decode_s,
                ffn_share=ffn_s / step_s,
                flop_ratio=ratio,
                ffn_seconds=ffn_s,
                decode_seconds=decode_s,
                runs=runs,
            )
        )
    return out


def bench_rows_to_csv(rows: Sequence[BenchRow], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["config", "tokens_per_s", "ffn_share", "flop_ratio", "ffn_seconds", "decode_seconds", "runs"]
        )
        for row in rows:
            writer.writerow(
                [
                    row.config,
                    repr(row.tokens_per_s),
                    repr(row.ffn_share),
                    repr(row.flop_ratio),
                    repr(row.ffn_seconds),
                    repr(row.decode_seconds),
                    row.runs,
                ]
            )
    return path
