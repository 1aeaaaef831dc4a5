"""Core-neuron extraction: token-wise sets, frequency tallies, sentence sets.

A token's core set is the top fraction of its strictly positive activations;
a sentence's core set is the top fraction of neurons that appear most often
across the token sets. Every selection uses nearest-rank descending order
with ties broken toward the lower neuron index, so results are identical
across platforms and runs.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "TokenCoreSet",
    "FrequencyMap",
    "SentenceCoreSet",
    "StabilityResult",
    "token_core",
    "frequency_counts",
    "sentence_core",
    "core_similarity",
    "stability_estimate",
    "write_core_sets_csv",
    "write_frequency_csv",
]

STABLE = "stable"
UNSTABLE = "unstable"


@dataclass(frozen=True)
class TokenCoreSet:
    """Neuron indices realizing one token's core set at one layer."""

    layer: int
    token_pos: int
    neurons: np.ndarray  # strictly increasing int64 indices

    def __len__(self) -> int:
        return int(self.neurons.size)


@dataclass(frozen=True)
class FrequencyMap:
    """Per-neuron counts of core-set membership across a sentence's tokens."""

    layer: int
    counts: np.ndarray  # length-N nonnegative ints

    @property
    def n_neurons(self) -> int:
        return int(self.counts.size)


@dataclass(frozen=True)
class SentenceCoreSet:
    """Neuron indices realizing one sentence's core set at one layer."""

    layer: int
    neurons: np.ndarray
    alpha: float = float("nan")
    beta: float = float("nan")

    def __len__(self) -> int:
        return int(self.neurons.size)


@dataclass(frozen=True)
class StabilityResult:
    verdict: str  # STABLE or UNSTABLE
    similarity: float


def _top_fraction_indices(values: np.ndarray, pool: np.ndarray, frac: float) -> np.ndarray:
    """Indices of the ceil(frac*|pool|) largest ``values[pool]`` entries.

    Ties broken toward lower index: the stable argsort on negated values
    keeps ascending-index order among equal values.
    """
    k = math.ceil(frac * pool.size)
    order = np.argsort(-values[pool], kind="stable")
    return np.sort(pool[order[:k]])


def token_core(activations, alpha: float, layer: int = 0, token_pos: int = 0) -> TokenCoreSet:
    """Select the top-alpha fraction of strictly positive activations.

    All-nonpositive inputs yield the empty set; that is a legal value so
    parameter sweeps over extreme fractions never abort.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    values = np.asarray(activations, dtype=np.float32)
    if values.ndim != 1:
        raise ValueError(f"activations must be 1-D, got shape {values.shape}")
    positive = np.flatnonzero(values > 0)
    if positive.size == 0:
        return TokenCoreSet(layer, token_pos, np.empty(0, dtype=np.int64))
    neurons = _top_fraction_indices(values, positive, alpha)
    return TokenCoreSet(layer, token_pos, neurons.astype(np.int64))


def frequency_counts(sets: Sequence[TokenCoreSet], n_neurons: int, layer: int | None = None) -> FrequencyMap:
    """Count how many token core sets contain each neuron."""
    if layer is None:
        layer = sets[0].layer if sets else 0
    for s in sets:
        if s.layer != layer:
            raise ValueError(f"mixed layers in frequency_counts: {s.layer} != {layer}")
        if s.neurons.size and s.neurons.max() >= n_neurons:
            raise ValueError(f"neuron index {int(s.neurons.max())} >= N={n_neurons}")
    if not sets:
        return FrequencyMap(layer, np.zeros(n_neurons, dtype=np.int64))
    merged = np.concatenate([s.neurons for s in sets])
    counts = np.bincount(merged, minlength=n_neurons).astype(np.int64)
    return FrequencyMap(layer, counts)


def sentence_core(freq: FrequencyMap, beta: float, alpha: float = float("nan")) -> SentenceCoreSet:
    """Select the top-beta fraction of neurons with nonzero frequency.

    The percentile pool is restricted to neurons that appeared in at least
    one token core set; otherwise a zero threshold would admit the whole
    nonzero pool no matter how small beta is.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must be in (0, 1], got {beta}")
    nonzero = np.flatnonzero(freq.counts > 0)
    if nonzero.size == 0:
        warnings.warn(f"sentence_core: all-zero frequency map at layer {freq.layer}")
        return SentenceCoreSet(freq.layer, np.empty(0, dtype=np.int64), alpha, beta)
    neurons = _top_fraction_indices(freq.counts.astype(np.float32), nonzero, beta)
    return SentenceCoreSet(freq.layer, neurons.astype(np.int64), alpha, beta)


def _as_index_array(s) -> np.ndarray:
    if isinstance(s, (TokenCoreSet, SentenceCoreSet)):
        return s.neurons
    return np.asarray(sorted(set(int(i) for i in s)), dtype=np.int64)


def core_similarity(a, b) -> float:
    """Jaccard overlap of two neuron index sets; two empty sets agree fully."""
    a = _as_index_array(a)
    b = _as_index_array(b)
    if a.size == 0 and b.size == 0:
        return 1.0
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = np.union1d(a, b).size
    return float(inter) / float(union)


def stability_estimate(prefix_set: SentenceCoreSet, full_set: SentenceCoreSet, tau: float) -> StabilityResult:
    """Compare the prompt-prefix core set against the full-prompt core set."""
    if prefix_set.layer != full_set.layer:
        raise ValueError(
            f"stability_estimate layer mismatch: {prefix_set.layer} != {full_set.layer}"
        )
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    sim = core_similarity(prefix_set, full_set)
    return StabilityResult(STABLE if sim >= tau else UNSTABLE, sim)


def write_core_sets_csv(sets: Iterable[TokenCoreSet | SentenceCoreSet], path) -> None:
    """`layer,neuron` rows, one per member neuron, in layer then index order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "neuron"])
        for s in sets:
            for n in s.neurons:
                writer.writerow([s.layer, int(n)])


def write_frequency_csv(maps: Iterable[FrequencyMap], path) -> None:
    """`layer,neuron,count` rows covering every neuron of every map."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "neuron", "count"])
        for m in maps:
            for n, c in enumerate(m.counts):
                writer.writerow([m.layer, n, int(c)])
