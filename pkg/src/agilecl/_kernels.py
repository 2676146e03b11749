"""Hot loops, each with a numba kernel and an equivalent pure-numpy path.

Set ``AGILECL_DISABLE_NUMBA=1`` (or run without numba installed) to force the
numpy path. Both paths return bitwise-identical results for identical inputs;
``tests/test_kernels.py`` checks that, and ``benchmarks/bench_kernels.py``
times them against each other.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("AGILECL_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# --------------------------------------------------------------- reservoir

def reservoir_assign_numpy(start_seen: int, n_items: int, capacity: int,
                           draws: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``n_items`` reservoir arrivals to a buffer holding ``start_seen`` items.

    Returns ``(item_for_slot, writer)`` where ``item_for_slot[k]`` is the local
    index of the last arrival written to slot ``k`` (-1 if untouched) and
    ``writer`` is the per-arrival destination slot (-1 if discarded).
    ``draws`` holds one integer per arrival that found the buffer full, drawn
    uniformly from ``[0, N]`` with ``N`` the seen count at that arrival.
    """
    direct = max(min(capacity - start_seen, n_items), 0)
    writer = np.full(n_items, -1, dtype=np.int64)
    writer[:direct] = np.arange(start_seen, start_seen + direct)
    tail = draws[: n_items - direct]
    writer[direct:] = np.where(tail < capacity, tail, -1)
    item_for_slot = np.full(capacity, -1, dtype=np.int64)
    kept = np.nonzero(writer >= 0)[0]
    np.maximum.at(item_for_slot, writer[kept], kept)
    return item_for_slot, writer


def _reservoir_assign_loop(start_seen, n_items, capacity, draws):
    writer = np.full(n_items, -1, dtype=np.int64)
    item_for_slot = np.full(capacity, -1, dtype=np.int64)
    seen = start_seen
    j = 0
    for i in range(n_items):
        if seen < capacity:
            k = seen
        else:
            k = draws[j]
            j += 1
        if k < capacity:
            writer[i] = k
            item_for_slot[k] = i
        seen += 1
    return item_for_slot, writer


def _inclusion_counts_loop(n_items, capacity, draws, counts):
    # draws: (trials, n_items - capacity); counts[i] += 1 when item i survives
    slots = np.empty(capacity, dtype=np.int64)
    for trial in range(draws.shape[0]):
        for k in range(capacity):
            slots[k] = k
        row = draws[trial]
        for i in range(capacity, n_items):
            k = row[i - capacity]
            if k < capacity:
                slots[k] = i
        for k in range(capacity):
            counts[slots[k]] += 1
    return counts


def inclusion_counts_numpy(n_items: int, capacity: int, draws: np.ndarray) -> np.ndarray:
    counts = np.zeros(n_items, dtype=np.int64)
    for row in draws:
        item_for_slot, _ = reservoir_assign_numpy(0, n_items, capacity, row)
        np.add.at(counts, item_for_slot, 1)
    return counts


# ----------------------------------------------------------- binned counts

def reliability_counts_numpy(bin_idx: np.ndarray, confidences: np.ndarray,
                             correct: np.ndarray, n_bins: int):
    counts = np.bincount(bin_idx, minlength=n_bins).astype(np.int64)
    conf_sum = np.bincount(bin_idx, weights=confidences, minlength=n_bins)
    acc_sum = np.bincount(bin_idx, weights=correct.astype(np.float64), minlength=n_bins)
    return counts, conf_sum, acc_sum


def _reliability_counts_loop(bin_idx, confidences, correct, n_bins):
    counts = np.zeros(n_bins, dtype=np.int64)
    conf_sum = np.zeros(n_bins)
    acc_sum = np.zeros(n_bins)
    for i in range(bin_idx.shape[0]):
        b = bin_idx[i]
        counts[b] += 1
        conf_sum[b] += confidences[i]
        if correct[i]:
            acc_sum[b] += 1.0
    return counts, conf_sum, acc_sum


def confusion_counts_numpy(true_idx: np.ndarray, pred_idx: np.ndarray, size: int) -> np.ndarray:
    flat = np.bincount(true_idx * size + pred_idx, minlength=size * size)
    return flat.reshape(size, size).astype(np.int64)


def _confusion_counts_loop(true_idx, pred_idx, size):
    out = np.zeros((size, size), dtype=np.int64)
    for i in range(true_idx.shape[0]):
        out[true_idx[i], pred_idx[i]] += 1
    return out


if HAVE_NUMBA:
    reservoir_assign_numba = njit(cache=False)(_reservoir_assign_loop)
    _inclusion_counts_numba = njit(cache=False)(_inclusion_counts_loop)
    reliability_counts_numba = njit(cache=False)(_reliability_counts_loop)
    confusion_counts_numba = njit(cache=False)(_confusion_counts_loop)

    def inclusion_counts_numba(n_items, capacity, draws):
        counts = np.zeros(n_items, dtype=np.int64)
        return _inclusion_counts_numba(n_items, capacity, np.ascontiguousarray(draws), counts)

    # ECE binning uses floating sums; bincount and the scalar loop accumulate
    # in the same order, so both stay bitwise equal.
    reservoir_assign = reservoir_assign_numba
    inclusion_counts = inclusion_counts_numba
    reliability_counts = reliability_counts_numba
    confusion_counts = confusion_counts_numba
else:
    reservoir_assign = reservoir_assign_numpy
    inclusion_counts = inclusion_counts_numpy
    reliability_counts = reliability_counts_numpy
    confusion_counts = confusion_counts_numpy


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
