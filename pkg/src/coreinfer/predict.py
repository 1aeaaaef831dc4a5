"""Sparse-plan construction: stability-guided and similarity-guided.

The stability route reuses the prompt's own sentence core sets for every
decode step. The similarity route looks the prompt up in a store of
semantic groups (labelled, or K-means clusters over a reference layer's
mean activations) and takes each in-range layer's most frequent neurons
within that group. Neither route owns any learned parameters: the store
holds only activation statistics.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import FrequencyMap, SentenceCoreSet, frequency_counts, sentence_core, token_core

__all__ = [
    "SparsePlan",
    "SemanticGroupStore",
    "SIMILARITY_LAYER_START",
    "default_reference_layer",
    "predict_stability",
    "build_group_store",
    "elbow_select_k",
    "assign_group",
    "predict_similarity",
    "kmeans",
    "save_store",
    "load_store",
    "plan_hash",
]

STRATEGY_STABILITY = "stability"
STRATEGY_SIMILARITY = "similarity"

# Clustering by meaning only emerges past the first few blocks, so
# similarity-guided plans leave layers 0..2 dense.
SIMILARITY_LAYER_START = 3

STORE_MAGIC = b"CNST"


def default_reference_layer(n_layers: int) -> int:
    """Deep-but-not-final layer used for clustering and stability checks."""
    return max(SIMILARITY_LAYER_START, int(0.78 * n_layers))


@dataclass
class SparsePlan:
    """Frozen per-layer neuron sets driving sparse decode."""

    strategy: str
    sets: dict[int, np.ndarray]  # layer -> sorted unique neuron indices
    layer_range: tuple[int, int]
    provenance: str

    def set_sizes(self) -> dict[int, int]:
        return {layer: int(v.size) for layer, v in sorted(self.sets.items())}


def plan_hash(plan: SparsePlan) -> str:
    """Digest of everything that determines which neurons execute."""
    h = hashlib.sha256()
    h.update(plan.strategy.encode())
    h.update(struct.pack("<qq", *plan.layer_range))
    for layer in sorted(plan.sets):
        h.update(struct.pack("<q", layer))
        h.update(np.asarray(plan.sets[layer], dtype=np.int64).tobytes())
    return h.hexdigest()


def predict_stability(prefill_sets: Sequence[SentenceCoreSet], n_layers: int | None = None) -> SparsePlan:
    """Identity mapping from the prompt's sentence core sets to a plan."""
    layers = [s.layer for s in prefill_sets]
    if n_layers is None:
        n_layers = len(prefill_sets)
    if sorted(layers) != list(range(n_layers)):
        raise ValueError(f"prefill sets must cover layers 0..{n_layers - 1}, got {sorted(layers)}")
    sets = {s.layer: np.asarray(s.neurons, dtype=np.int64) for s in prefill_sets}
    return SparsePlan(STRATEGY_STABILITY, sets, (0, n_layers), "prefill")


@dataclass
class SemanticGroupStore:
    """Persisted clusters: centroids plus per-group neuron frequencies."""

    reference_layer: int
    k_groups: int
    centroids: np.ndarray  # [k_groups, n_neurons] mean reference-layer activation
    per_group_freq: list[dict[int, FrequencyMap]]  # group -> layer -> counts
    gamma: float
    layer_range: tuple[int, int]
    n_neurons: int
    n_layers: int
    group_labels: list[str] | None = None
    group_token_totals: list[int] = field(default_factory=list)

    def validate(self) -> "SemanticGroupStore":
        if self.k_groups < 1:
            raise ValueError("store must hold at least one group")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("store centroids contain non-finite values")
        for gid, freqs in enumerate(self.per_group_freq):
            total = self.group_token_totals[gid] if self.group_token_totals else None
            for layer, fm in freqs.items():
                if fm.n_neurons != self.n_neurons:
                    raise ValueError(f"group {gid} layer {layer}: bad frequency length")
                if total is not None and fm.counts.max(initial=0) > total:
                    raise ValueError(
                        f"group {gid} layer {layer}: count exceeds member token total {total}"
                    )
        return self


def elbow_select_k(wcss: Sequence[tuple[int, float]]) -> int:
    """Interior point furthest from the chord between the first and last WCSS points."""
    if len(wcss) < 3:
        raise ValueError(f"elbow selection needs >= 3 candidate points, got {len(wcss)}")
    ks = np.asarray([p[0] for p in wcss], dtype=np.float64)
    ws = np.asarray([p[1] for p in wcss], dtype=np.float64)
    if np.any(np.diff(ws) > 0):
        warnings.warn("WCSS curve is not non-increasing; elbow may be unreliable")
    dk, dw = ks[-1] - ks[0], ws[-1] - ws[0]
    # Perpendicular distance to the chord, up to the constant chord length.
    cross = np.abs(dk * (ws - ws[0]) - dw * (ks - ks[0]))
    interior = cross[1:-1]
    best = int(np.argmax(interior)) + 1  # ties resolve to the smallest k
    return int(ks[best])


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray, float]:
    """Deterministic Lloyd iteration with farthest-point seeding.

    Returns (centroids, labels, wcss). Distances and means run in float64
    so WCSS comparisons across k are stable.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} out of range for {n} points")
    rng = np.random.default_rng(seed)
    centers = [pts[int(rng.integers(n))]]
    d2 = np.square(pts - centers[0]).sum(axis=1)
    while len(centers) < k:
        centers.append(pts[int(np.argmax(d2))])
        d2 = np.minimum(d2, np.square(pts - centers[-1]).sum(axis=1))
    centroids = np.stack(centers)

    prev_wcss = np.inf
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dists = np.square(pts[:, None, :] - centroids[None, :, :]).sum(axis=2)
        labels = np.argmin(dists, axis=1)
        wcss = float(dists[np.arange(n), labels].sum())
        for g in range(k):
            members = pts[labels == g]
            if members.size:
                centroids[g] = members.mean(axis=0)
            else:
                # Re-seat an empty cluster at the worst-served point.
                centroids[g] = pts[int(np.argmax(dists[np.arange(n), labels]))]
        if prev_wcss - wcss <= tol * max(prev_wcss, 1e-30):
            break
        prev_wcss = wcss
    dists = np.square(pts[:, None, :] - centroids[None, :, :]).sum(axis=2)
    labels = np.argmin(dists, axis=1)
    wcss = float(dists[np.arange(n), labels].sum())
    return centroids, labels, wcss


def _sentence_representation(activations: Mapping[int, np.ndarray], reference_layer: int) -> np.ndarray:
    block = activations.get(reference_layer)
    if block is None:
        raise ValueError(f"sentence activations missing reference layer {reference_layer}")
    return np.asarray(block, dtype=np.float64).mean(axis=0)


def build_group_store(
    sentences: Sequence[Mapping[int, np.ndarray]],
    labels: Sequence[str] | None,
    alpha: float,
    gamma: float,
    n_layers: int,
    n_neurons: int,
    reference_layer: int | None = None,
    k: int | None = None,
    seed: int = 0,
    max_k: int = 8,
) -> SemanticGroupStore:
    """Group sentences and tally how often each neuron enters member core sets.

    ``sentences`` maps layer index to a [tokens, neurons] activation block per
    sentence. With labels present the grouping follows them; otherwise
    K-means runs on mean reference-layer activations with k picked by the
    WCSS elbow (or forced via ``k``).
    """
    if len(sentences) < 2:
        raise ValueError("group store needs at least 2 sentences")
    if labels is not None and len(labels) != len(sentences):
        raise ValueError(f"{len(labels)} labels for {len(sentences)} sentences")
    if reference_layer is None:
        reference_layer = default_reference_layer(n_layers)
    if not 0 <= reference_layer < n_layers:
        raise ValueError(f"reference layer {reference_layer} outside 0..{n_layers - 1}")
    layer_range = (SIMILARITY_LAYER_START, n_layers)

    reps = np.stack([_sentence_representation(s, reference_layer) for s in sentences])
    group_labels: list[str] | None = None
    if labels is not None:
        group_labels = sorted(set(labels))
        assignment = np.asarray([group_labels.index(l) for l in labels], dtype=np.int64)
        k_groups = len(group_labels)
        centroids = np.stack([reps[assignment == g].mean(axis=0) for g in range(k_groups)])
    else:
        spread = float(np.square(reps - reps.mean(axis=0)).sum())
        if spread == 0.0:
            warnings.warn("all sentence representations identical; falling back to one group")
            k_groups = 1
        elif k is not None:
            if k > len(sentences):
                raise ValueError(f"k={k} exceeds {len(sentences)} sentences")
            k_groups = k
        else:
            candidates = range(1, min(max_k, len(sentences)) + 1)
            curve = [(kk, kmeans(reps, kk, seed=seed)[2]) for kk in candidates]
            k_groups = elbow_select_k(curve)
        centroids, assignment, _ = kmeans(reps, k_groups, seed=seed)

    per_group_freq: list[dict[int, FrequencyMap]] = []
    token_totals: list[int] = []
    for g in range(k_groups):
        members = [sentences[i] for i in np.flatnonzero(assignment == g)]
        freqs: dict[int, FrequencyMap] = {}
        total = 0
        for layer in range(*layer_range):
            token_sets = []
            for s in members:
                block = s.get(layer)
                if block is None:
                    raise ValueError(f"sentence activations missing layer {layer}")
                token_sets.extend(
                    token_core(block[t], alpha, layer=layer, token_pos=t)
                    for t in range(block.shape[0])
                )
            freqs[layer] = frequency_counts(token_sets, n_neurons, layer=layer)
        total = sum(s[reference_layer].shape[0] for s in members)
        per_group_freq.append(freqs)
        token_totals.append(total)

    return SemanticGroupStore(
        reference_layer=reference_layer,
        k_groups=k_groups,
        centroids=centroids.astype(np.float32),
        per_group_freq=per_group_freq,
        gamma=gamma,
        layer_range=layer_range,
        n_neurons=n_neurons,
        n_layers=n_layers,
        group_labels=group_labels,
        group_token_totals=token_totals,
    ).validate()


def assign_group(store: SemanticGroupStore, sentence_reference_activation) -> int:
    """Nearest centroid by Euclidean distance; ties resolve to the lowest id."""
    vec = np.asarray(sentence_reference_activation, dtype=np.float64)
    if vec.shape != (store.n_neurons,):
        raise ValueError(f"reference activation must have length {store.n_neurons}")
    d2 = np.square(store.centroids.astype(np.float64) - vec).sum(axis=1)
    return int(np.argmin(d2))


def predict_similarity(store: SemanticGroupStore, group_id: int) -> SparsePlan:
    """Top-gamma most frequent neurons of one group, per in-range layer."""
    if not 0 <= group_id < store.k_groups:
        raise ValueError(f"group {group_id} does not exist (k={store.k_groups})")
    freqs = store.per_group_freq[group_id]
    if all(fm.counts.max(initial=0) == 0 for fm in freqs.values()):
        raise ValueError(f"group {group_id} has no frequency data")
    sets: dict[int, np.ndarray] = {}
    for layer in range(*store.layer_range):
        chosen = sentence_core(freqs[layer], store.gamma)
        sets[layer] = np.asarray(chosen.neurons, dtype=np.int64)
    name = store.group_labels[group_id] if store.group_labels else str(group_id)
    return SparsePlan(STRATEGY_SIMILARITY, sets, store.layer_range, f"group:{name}")


def save_store(store: SemanticGroupStore, path) -> Path:
    """Serialize to the `.cinfstore` layout: JSON header, centroid block,
    per-group per-layer u32 count arrays, CRC32 trailer."""
    store.validate()
    header = {
        "reference_layer": store.reference_layer,
        "k_groups": store.k_groups,
        "gamma": store.gamma,
        "layer_range": list(store.layer_range),
        "N": store.n_neurons,
        "L": store.n_layers,
        "group_labels": store.group_labels,
        "group_token_totals": store.group_token_totals,
    }
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [STORE_MAGIC, struct.pack("<I", len(raw_header)), raw_header]
    parts.append(np.ascontiguousarray(store.centroids, dtype="<f4").tobytes())
    for freqs in store.per_group_freq:
        for layer in range(*store.layer_range):
            parts.append(freqs[layer].counts.astype("<u4").tobytes())
    body = b"".join(parts)
    path = Path(path)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    return path


def load_store(path) -> SemanticGroupStore:
    blob = Path(path).read_bytes()
    if len(blob) < len(STORE_MAGIC) + 8:
        raise ValueError(f"{path}: truncated store file")
    body, trailer = blob[:-4], blob[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise ValueError(f"{path}: store checksum failure")
    if body[:4] != STORE_MAGIC:
        raise ValueError(f"{path}: bad store magic")
    (header_len,) = struct.unpack("<I", body[4:8])
    header = json.loads(body[8 : 8 + header_len].decode("utf-8"))
    off = 8 + header_len
    k, n = header["k_groups"], header["N"]
    start, stop = header["layer_range"]
    centroids = np.frombuffer(body, dtype="<f4", count=k * n, offset=off).reshape(k, n).copy()
    off += 4 * k * n
    per_group_freq: list[dict[int, FrequencyMap]] = []
    for _ in range(k):
        freqs: dict[int, FrequencyMap] = {}
        for layer in range(start, stop):
            counts = np.frombuffer(body, dtype="<u4", count=n, offset=off).astype(np.int64)
            off += 4 * n
            freqs[layer] = FrequencyMap(layer, counts)
        per_group_freq.append(freqs)
    if off != len(body):
        raise ValueError(f"{path}: {len(body) - off} trailing bytes in store")
    return SemanticGroupStore(
        reference_layer=header["reference_layer"],
        k_groups=k,
        centroids=centroids,
        per_group_freq=per_group_freq,
        gamma=header["gamma"],
        layer_range=(start, stop),
        n_neurons=n,
        n_layers=header["L"],
        group_labels=header.get("group_labels"),
        group_token_totals=header.get("group_token_totals", []),
    ).validate()
