"""End-to-end generation: dense pre-fill, core extraction, frozen sparse decode.

The pipeline runs the prompt densely while recording activations, extracts
per-layer sentence core sets, estimates whether they have stabilized by
comparing the first half of the prompt against the whole prompt, picks a
prediction strategy, freezes the resulting plan, and then decodes with that
single plan for every step. The plan digest is re-computed at each step so
any mutation shows up in the freeze audit.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import core
from .model import (
    DecodeStats,
    KVCache,
    Model,
    PlanExecution,
    decode_with_execution,
    forward_decode_dense,
    forward_prefill,
)
from .predict import (
    SemanticGroupStore,
    SparsePlan,
    assign_group,
    default_reference_layer,
    plan_hash,
    predict_similarity,
    predict_stability,
)

__all__ = [
    "GenerationConfig",
    "GenerationReport",
    "ExtractResult",
    "MissingStoreError",
    "prefill_and_extract",
    "generate",
    "plan_freeze_audit",
]

STRATEGIES = ("auto", "force_stability", "force_similarity", "dense")
SAMPLERS = ("greedy", "top_k")


class MissingStoreError(RuntimeError):
    """Similarity-guided prediction requested without a group store."""


@dataclass
class GenerationConfig:
    alpha: float = 0.4
    beta: float = 0.2
    gamma: float = 0.2
    tau_stability: float = 0.85
    strategy: str = "auto"
    max_new_tokens: int = 32
    sampling: str = "greedy"
    top_k: int = 0
    seed: int = 0
    store_path: str | None = None
    reference_layer: int | None = None

    def validate(self) -> "GenerationConfig":
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {value}")
        if not 0.0 < self.tau_stability < 1.0:
            raise ValueError(f"tau_stability must be in (0, 1), got {self.tau_stability}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.sampling not in SAMPLERS:
            raise ValueError(f"sampling must be one of {SAMPLERS}, got {self.sampling!r}")
        if self.sampling == "top_k" and self.top_k < 1:
            raise ValueError("top_k sampling requires top_k >= 1")
        return self


@dataclass
class ExtractResult:
    kv: KVCache
    sentence_sets: list[core.SentenceCoreSet]  # one per layer
    verdict: str
    similarity: float
    activations: dict[int, np.ndarray]
    last_logits: np.ndarray
    reference_layer: int


@dataclass
class GenerationReport:
    prompt_len: int
    token_ids: list[int]
    text: str | None
    strategy: str  # resolved: dense | stability | similarity
    verdict: str
    similarity: float
    set_sizes: dict[int, int]
    dense_layers: list[int]
    provenance: str
    plan_hashes: list[str]
    ffn_multiplies_actual: int
    ffn_multiplies_dense: int
    timings: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "prompt_len": self.prompt_len,
            "token_ids": self.token_ids,
            "text": self.text,
            "strategy": self.strategy,
            "verdict": self.verdict,
            "similarity": self.similarity,
            "set_sizes": {str(k): v for k, v in sorted(self.set_sizes.items())},
            "dense_layers": self.dense_layers,
            "provenance": self.provenance,
            "plan_hashes": self.plan_hashes,
            "ffn_multiplies": {
                "actual": self.ffn_multiplies_actual,
                "dense_equivalent": self.ffn_multiplies_dense,
            },
            "timings": self.timings,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def prefill_and_extract(model: Model, prompt_ids: Sequence[int], cfg: GenerationConfig) -> ExtractResult:
    """Dense pre-fill with recording, then per-layer core extraction.

    Stability is judged at the reference layer by comparing the sentence
    core set of the first ceil(M/2) tokens against the full prompt's.
    """
    cfg.validate()
    ids = np.asarray(prompt_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("prompt must be nonempty")
    result = forward_prefill(model, ids, record=True)
    n_layers = model.config.n_layers
    ref = cfg.reference_layer if cfg.reference_layer is not None else default_reference_layer(n_layers)
    if not 0 <= ref < n_layers:
        raise ValueError(f"reference layer {ref} outside 0..{n_layers - 1}")

    m = int(ids.size)
    half = math.ceil(m / 2)
    sentence_sets: list[core.SentenceCoreSet] = []
    verdict, similarity = core.STABLE, 1.0
    for layer in range(n_layers):
        block = result.activations[layer]
        token_sets = [
            core.token_core(block[t], cfg.alpha, layer=layer, token_pos=t) for t in range(m)
        ]
        freq = core.frequency_counts(token_sets, model.config.d_ffn, layer=layer)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            full_set = core.sentence_core(freq, cfg.beta, alpha=cfg.alpha)
            sentence_sets.append(full_set)
            if layer == ref:
                prefix_freq = core.frequency_counts(
                    token_sets[:half], model.config.d_ffn, layer=layer
                )
                prefix_set = core.sentence_core(prefix_freq, cfg.beta, alpha=cfg.alpha)
                est = core.stability_estimate(prefix_set, full_set, cfg.tau_stability)
                verdict, similarity = est.verdict, est.similarity
    return ExtractResult(
        kv=result.kv,
        sentence_sets=sentence_sets,
        verdict=verdict,
        similarity=similarity,
        activations=result.activations,
        last_logits=result.last_logits,
        reference_layer=ref,
    )


def _resolve_plan(model: Model, extract: ExtractResult, cfg: GenerationConfig, store: SemanticGroupStore | None) -> SparsePlan | None:
    if cfg.strategy == "dense":
        return None
    use_similarity = cfg.strategy == "force_similarity" or (
        cfg.strategy == "auto" and extract.verdict == core.UNSTABLE
    )
    if not use_similarity:
        return predict_stability(extract.sentence_sets, model.config.n_layers)
    if store is None:
        raise MissingStoreError(
            "similarity-guided prediction needs a semantic group store; "
            "pass one via --store"
        )
    rep = extract.activations[store.reference_layer].mean(axis=0)
    gid = assign_group(store, rep)
    return predict_similarity(store, gid)


def _sample(logits: np.ndarray, cfg: GenerationConfig, rng: np.random.Generator) -> int:
    if cfg.sampling == "greedy":
        return int(np.argmax(logits))
    k = min(cfg.top_k, logits.size)
    top = np.argpartition(-logits, k - 1)[:k]
    top = top[np.argsort(-logits[top], kind="stable")]
    shifted = logits[top].astype(np.float64) - float(logits[top].max())
    probs = np.exp(shifted)
    probs /= probs.sum()
    return int(rng.choice(top, p=probs))


def generate(model: Model, prompt_ids: Sequence[int], cfg: GenerationConfig, store: SemanticGroupStore | None = None) -> GenerationReport:
    """Run the full pipeline and decode ``max_new_tokens`` with a frozen plan."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    t0 = time.perf_counter()
    extract = prefill_and_extract(model, prompt_ids, cfg)
    t_prefill = time.perf_counter() - t0

    plan = _resolve_plan(model, extract, cfg, store)
    if plan is None:
        execution = None
        set_sizes: dict[int, int] = {}
        dense_layers = list(range(model.config.n_layers))
        provenance = "dense"
        resolved = "dense"
        hashes: list[str] = []
    else:
        execution = PlanExecution(model, plan)
        set_sizes = {
            layer: int(plan.sets[layer].size) for layer in range(*plan.layer_range)
        }
        dense_layers = [
            i for i in range(model.config.n_layers) if not plan.layer_range[0] <= i < plan.layer_range[1]
        ]
        provenance = plan.provenance
        resolved = plan.strategy
        hashes = [plan_hash(plan)]
    t_freeze = time.perf_counter() - t0 - t_prefill

    stats = DecodeStats()
    tokens: list[int] = []
    logits = extract.last_logits
    t_decode0 = time.perf_counter()
    for step in range(cfg.max_new_tokens):
        tokens.append(_sample(logits, cfg, rng))
        if step + 1 == cfg.max_new_tokens:
            break
        if execution is None:
            logits = forward_decode_dense(model, tokens[-1], extract.kv, stats)
        else:
            logits = decode_with_execution(model, tokens[-1], extract.kv, execution, stats)
            hashes.append(plan_hash(plan))
    t_decode = time.perf_counter() - t_decode0

    text = model.detokenize(tokens) if model.vocab is not None else None
    return GenerationReport(
        prompt_len=int(np.asarray(prompt_ids).size),
        token_ids=tokens,
        text=text,
        strategy=resolved,
        verdict=extract.verdict,
        similarity=extract.similarity,
        set_sizes=set_sizes,
        dense_layers=dense_layers,
        provenance=provenance,
        plan_hashes=hashes,
        ffn_multiplies_actual=stats.ffn_multiplies_actual,
        ffn_multiplies_dense=stats.ffn_multiplies_dense,
        timings={
            "prefill_s": t_prefill,
            "plan_freeze_s": t_freeze,
            "decode_s": t_decode,
            "decode_ffn_s": stats.ffn_seconds,
        },
    )


def plan_freeze_audit(report: GenerationReport) -> bool:
    """True iff the plan digest never changed across decode steps."""
    return len(set(report.plan_hashes)) <= 1
