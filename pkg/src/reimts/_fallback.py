"""Pure numpy implementations of the packing kernels."""
import numpy as np


def time_buckets(timestamps, period, num_buckets):
    t = np.asarray(timestamps, dtype=np.float64)
    k = np.ceil(t / period).astype(np.int64) - 1
    # snap to the exact float comparisons T(k-1) < t <= Tk
    k = np.where(t <= period * k, k - 1, k)
    k = np.where(t > period * (k + 1), k + 1, k)
    return np.clip(k, 0, num_buckets - 1)


def count_buckets(timestamps, variable_ids, num_buckets, num_variables):
    t = np.asarray(timestamps, dtype=np.float64)
    v = np.asarray(variable_ids, dtype=np.int64)
    n = len(t)
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out
    order = np.lexsort((t, v))
    vs = v[order]
    counts = np.bincount(vs, minlength=num_variables)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank = np.arange(n) - starts[vs]
    size = counts[vs]
    base = size // num_buckets
    extra = size % num_buckets
    head = extra * (base + 1)
    big = rank // np.maximum(base + 1, 1)
    small = extra + (rank - head) // np.maximum(base, 1)
    out[order] = np.where(rank < head, big, small)
    return out


def pack_slots(timestamps, variable_ids, buckets, num_buckets, num_variables):
    n = len(timestamps)
    slots = np.empty(n, dtype=np.int64)
    if n == 0:
        return slots, 0
    key = buckets * num_variables + variable_ids
    order = np.lexsort((timestamps, key))
    ks = key[order]
    counts = np.bincount(ks, minlength=num_buckets * num_variables)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    slots[order] = np.arange(n) - starts[ks]
    return slots, int(counts.max())
