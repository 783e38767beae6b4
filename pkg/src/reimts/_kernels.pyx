# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled packing kernels; same contracts as ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport ceil

cnp.import_array()


def time_buckets(timestamps, double period, Py_ssize_t num_buckets):
    cdef const double[:] t = np.ascontiguousarray(timestamps, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0], i
    cdef long long k
    out = np.empty(n, dtype=np.int64)
    cdef long long[:] o = out
    for i in range(n):
        k = <long long>ceil(t[i] / period) - 1
        if t[i] <= period * k:
            k -= 1
        if t[i] > period * (k + 1):
            k += 1
        if k < 0:
            k = 0
        elif k > num_buckets - 1:
            k = num_buckets - 1
        o[i] = k
    return out


def count_buckets(timestamps, variable_ids, Py_ssize_t num_buckets, Py_ssize_t num_variables):
    t_arr = np.ascontiguousarray(timestamps, dtype=np.float64)
    v_arr = np.ascontiguousarray(variable_ids, dtype=np.int64)
    cdef Py_ssize_t n = t_arr.shape[0], i, j
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out
    cdef long long[:] o = out
    cdef const long long[:] v = v_arr
    cdef const long long[:] order = np.lexsort((t_arr, v_arr))
    cdef long long[:] counts = np.zeros(num_variables, dtype=np.int64)
    cdef long long[:] seen = np.zeros(num_variables, dtype=np.int64)
    cdef long long var, r, size, base, extra, head
    for i in range(n):
        counts[v[i]] += 1
    for i in range(n):
        j = order[i]
        var = v[j]
        r = seen[var]
        seen[var] += 1
        size = counts[var]
        base = size // num_buckets
        extra = size % num_buckets
        head = extra * (base + 1)
        if r < head:
            o[j] = r // (base + 1)
        else:
            o[j] = extra + (r - head) // base
    return out


def pack_slots(timestamps, variable_ids, buckets, Py_ssize_t num_buckets, Py_ssize_t num_variables):
    t_arr = np.ascontiguousarray(timestamps, dtype=np.float64)
    key_arr = np.ascontiguousarray(buckets, dtype=np.int64) * num_variables + np.ascontiguousarray(variable_ids, dtype=np.int64)
    cdef Py_ssize_t n = t_arr.shape[0], i, j
    slots = np.empty(n, dtype=np.int64)
    if n == 0:
        return slots, 0
    cdef long long[:] s = slots
    cdef const long long[:] key = key_arr
    cdef const long long[:] order = np.lexsort((t_arr, key_arr))
    cdef long long[:] fill = np.zeros(num_buckets * num_variables, dtype=np.int64)
    cdef long long longest = 0, c
    for i in range(n):
        j = order[i]
        c = fill[key[j]]
        s[j] = c
        fill[key[j]] = c + 1
        if c + 1 > longest:
            longest = c + 1
    return slots, int(longest)
