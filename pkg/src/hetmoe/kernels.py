"""Hot numeric kernels with numba and pure-numpy implementations.

Every public function dispatches on :func:`hetmoe.backend.active_backend`.
Both implementations are kept semantically identical:

* ``topk_rows``       - per-row indices of the k largest entries, ordered by
                        descending value, ties broken toward the lowest index.
* ``greedy_dispatch`` - capacity-limited slot assignment, greedy in token
                        order: earlier tokens claim slots for all their
                        choices before any later token does, so a token's
                        outcome never depends on the tokens after it.
                        Overflow pairs get slot -1.
* ``gelu_fwd/bwd``    - exact (erf-based) GELU and its derivative.
* ``scatter_rows_add`` - out[idx[i], :] += rows[i, :] with duplicate indices
                        accumulating.

The integer kernels are bit-identical across backends; the GELU pair may
differ by an ulp (libm erf vs scipy erf).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

from . import backend

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


# ---------------------------------------------------------------------------
# numpy implementations


def _topk_rows_np(scores: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k])


def _greedy_dispatch_np(selected: np.ndarray, capacities: np.ndarray):
    n_tokens, k = selected.shape
    counts = np.zeros(capacities.shape[0], dtype=np.int64)
    slots = np.full((n_tokens, k), -1, dtype=np.int64)
    for t in range(n_tokens):
        for rank in range(k):
            e = selected[t, rank]
            if counts[e] < capacities[e]:
                slots[t, rank] = counts[e]
                counts[e] += 1
    return slots, counts


def _gelu_fwd_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + _erf(x * _INV_SQRT2))


def _gelu_bwd_np(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def _scatter_rows_add_np(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    np.add.at(out, idx, rows)


# ---------------------------------------------------------------------------
# numba implementations

if backend.NUMBA_AVAILABLE:
    from numba import njit

    @njit(cache=True)
    def _topk_rows_nb(scores, k):
        n_tokens, n = scores.shape
        out = np.empty((n_tokens, k), dtype=np.int64)
        for t in range(n_tokens):
            used = np.zeros(n, dtype=np.bool_)
            for j in range(k):
                best = -1
                for i in range(n):
                    if not used[i] and (best < 0 or scores[t, i] > scores[t, best]):
                        best = i
                out[t, j] = best
                used[best] = True
        return out

    @njit(cache=True)
    def _greedy_dispatch_nb(selected, capacities):
        n_tokens, k = selected.shape
        counts = np.zeros(capacities.shape[0], dtype=np.int64)
        slots = np.full((n_tokens, k), -1, dtype=np.int64)
        for t in range(n_tokens):
            for rank in range(k):
                e = selected[t, rank]
                if counts[e] < capacities[e]:
                    slots[t, rank] = counts[e]
                    counts[e] += 1
        return slots, counts

    @njit(cache=True)
    def _gelu_fwd_nb(x):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.shape[0]):
            v = flat_x[i]
            flat_o[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
        return out

    @njit(cache=True)
    def _gelu_bwd_nb(x, g):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_g = g.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.shape[0]):
            v = flat_x[i]
            cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
            pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
            flat_o[i] = flat_g[i] * (cdf + v * pdf)
        return out

    @njit(cache=True)
    def _scatter_rows_add_nb(out, idx, rows):
        for i in range(idx.shape[0]):
            r = idx[i]
            for j in range(rows.shape[1]):
                out[r, j] += rows[i, j]


# ---------------------------------------------------------------------------
# dispatchers


def _use_numba() -> bool:
    return backend.active_backend() == "numba"


def topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, descending, ties to lowest index."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"expected a 2-d score matrix, got shape {scores.shape}")
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k={k} out of range for {scores.shape[1]} columns")
    if _use_numba():
        return _topk_rows_nb(scores, k)
    return _topk_rows_np(scores, k)


def greedy_dispatch(selected: np.ndarray, capacities: np.ndarray):
    """Assign (token, choice) pairs to expert slots; returns (slots, counts).

    ``slots[t, r]`` is the slot index granted to token ``t``'s rank-``r``
    choice, or -1 if that expert was already full. Earlier tokens win.
    """
    selected = np.ascontiguousarray(selected, dtype=np.int64)
    capacities = np.ascontiguousarray(capacities, dtype=np.int64)
    if _use_numba():
        return _greedy_dispatch_nb(selected, capacities)
    return _greedy_dispatch_np(selected, capacities)


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _use_numba():
        return _gelu_fwd_nb(x)
    return _gelu_fwd_np(x)


def gelu_bwd(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if _use_numba():
        return _gelu_bwd_nb(x, g)
    return _gelu_bwd_np(x, g)


def scatter_rows_add(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if _use_numba() and out.flags.c_contiguous:
        _scatter_rows_add_nb(out, idx, rows)
    else:
        _scatter_rows_add_np(out, idx, rows)


__all__ = [
    "topk_rows",
    "greedy_dispatch",
    "gelu_fwd",
    "gelu_bwd",
    "scatter_rows_add",
]
