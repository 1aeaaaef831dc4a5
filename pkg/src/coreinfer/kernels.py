"""Dense linear algebra and selection primitives shared by every stage.

All kernels are pure functions over float32 numpy arrays. The matrix-vector
product reduces each output row with an accumulation order that depends only
on the row length, never on how many rows are computed, so evaluating a
subset of rows reproduces the corresponding dense outputs bit for bit. That
exactness is what lets the sparse decode path be audited against the dense
path instead of merely compared within a tolerance.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping

import numpy as np
from scipy.special import expit

__all__ = [
    "matvec",
    "masked_matvec",
    "select_rows_matvec",
    "relu",
    "silu",
    "softmax",
    "rmsnorm",
    "layernorm",
    "top_fraction_threshold",
    "MultiplyCounter",
]

_F32 = np.float32


class MultiplyCounter:
    """Counts scalar multiplies issued by the matvec kernels while active.

    Context manager used by tests and the benchmark harness to validate the
    closed-form FLOP accounting against what the kernels actually do. Not
    thread-safe; instrumentation only.
    """

    _active: list["MultiplyCounter"] = []

    def __init__(self) -> None:
        self.multiplies = 0

    def __enter__(self) -> "MultiplyCounter":
        MultiplyCounter._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        MultiplyCounter._active.remove(self)


def _tally(n: int) -> None:
    for counter in MultiplyCounter._active:
        counter.multiplies += n


def _as_f32_vector(v, name: str) -> np.ndarray:
    out = np.asarray(v, dtype=_F32)
    if out.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    return out


def _as_f32_matrix(m, name: str) -> np.ndarray:
    out = np.asarray(m, dtype=_F32)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def matvec(m, v) -> np.ndarray:
    """Row-major matrix times vector, fixed per-row accumulation order.

    Implemented with einsum rather than BLAS gemv: einsum's reduction over
    one row is identical no matter how many rows the call covers, which is
    required for the masked/dense bit-equality guarantee.
    """
    m = _as_f32_matrix(m, "matrix")
    v = _as_f32_vector(v, "vector")
    if m.shape[1] != v.shape[0]:
        raise ValueError(
            f"matvec shape mismatch: matrix {m.shape[0]}x{m.shape[1]} "
            f"cannot multiply vector of length {v.shape[0]}"
        )
    _tally(m.shape[0] * m.shape[1])
    return np.einsum("ij,j->i", m, v)


def select_rows_matvec(m, v, rows: np.ndarray) -> np.ndarray:
    """Compute only ``rows`` of ``matvec(m, v)``; same kernel, same bits.

    ``rows`` must be in-range; an empty selection yields an empty vector.
    """
    m = _as_f32_matrix(m, "matrix")
    v = _as_f32_vector(v, "vector")
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= m.shape[0]):
        raise ValueError(
            f"row mask out of range for matrix with {m.shape[0]} rows: "
            f"offending index {int(rows.min() if rows.min() < 0 else rows.max())}"
        )
    if m.shape[1] != v.shape[0]:
        raise ValueError(
            f"matvec shape mismatch: matrix {m.shape[0]}x{m.shape[1]} "
            f"cannot multiply vector of length {v.shape[0]}"
        )
    if rows.size == 0:
        return np.empty(0, dtype=_F32)
    _tally(rows.size * m.shape[1])
    return np.einsum("ij,j->i", m[rows], v)


def masked_matvec(m, v, rowmask: Iterable[int]) -> Mapping[int, float]:
    """Sparse matvec returning ``{row: value}`` for every row in the mask."""
    rows = np.asarray(sorted(set(int(r) for r in rowmask)), dtype=np.int64)
    values = select_rows_matvec(m, v, rows)
    return {int(r): float(x) for r, x in zip(rows, values)}


def relu(v) -> np.ndarray:
    v = _as_f32_vector(v, "input")
    return np.maximum(v, _F32(0.0))


def silu(v) -> np.ndarray:
    v = _as_f32_vector(v, "input")
    return v * expit(v)


def softmax(v) -> np.ndarray:
    v = _as_f32_vector(v, "input")
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def rmsnorm(v, gain, eps: float = 1e-5) -> np.ndarray:
    v = _as_f32_vector(v, "input")
    gain = _as_f32_vector(gain, "gain")
    ms = np.mean(np.square(v))
    return (v / np.sqrt(ms + _F32(eps))) * gain


def layernorm(v, gain, bias, eps: float = 1e-5) -> np.ndarray:
    v = _as_f32_vector(v, "input")
    gain = _as_f32_vector(gain, "gain")
    bias = _as_f32_vector(bias, "bias")
    mean = np.mean(v)
    var = np.mean(np.square(v - mean))
    return (v - mean) / np.sqrt(var + _F32(eps)) * gain + bias


def top_fraction_threshold(values, frac: float) -> float:
    """Value of the k-th largest element, k = ceil(frac * n), nearest rank.

    Exactly k elements are at or above the returned threshold once ties at
    the threshold are broken toward lower indices (the selection rule used
    throughout core-set extraction).
    """
    values = _as_f32_vector(values, "values")
    if values.size == 0:
        raise ValueError("top_fraction_threshold: empty input")
    if not 0.0 < frac <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {frac}")
    k = math.ceil(frac * values.size)
    return float(np.partition(values, values.size - k)[values.size - k])
