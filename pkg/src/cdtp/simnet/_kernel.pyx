# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tandem-queue propagation kernel."""

import numpy as np


def propagate(const long long[::1] inject, const long long[:, ::1] ser,
              const long long[::1] lat, const long long[::1] hold):
    cdef Py_ssize_t n_links = ser.shape[0]
    cdef Py_ssize_t n_pkts = ser.shape[1]
    if inject.shape[0] != n_pkts or lat.shape[0] != n_links or hold.shape[0] != n_links:
        raise ValueError("shape mismatch")
    out = np.empty((n_links + 1, n_pkts), dtype=np.int64)
    cdef long long[:, ::1] arr = out
    cdef Py_ssize_t i, j
    cdef long long free, start
    for j in range(n_pkts):
        arr[0, j] = inject[j]
    for i in range(n_links):
        free = -9223372036854775807
        for j in range(n_pkts):
            start = arr[i, j]
            if free > start:
                start = free
            start += hold[i]
            free = start + ser[i, j]
            arr[i + 1, j] = free + lat[i]
    return out
