# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled randomized-response kernels drawing straight from a numpy bit generator."""

import numpy as np

from cpython.pycapsule cimport PyCapsule_GetPointer, PyCapsule_IsValid
from libc.stdint cimport int64_t, uint8_t
from numpy.random cimport bitgen_t


cdef bitgen_t* _bitgen(object bit_generator) except NULL:
    capsule = bit_generator.capsule
    if not PyCapsule_IsValid(capsule, "BitGenerator"):
        raise ValueError("invalid bit generator capsule")
    return <bitgen_t*> PyCapsule_GetPointer(capsule, "BitGenerator")


def rr_bits(const uint8_t[::1] truth, double p, double q, object bit_generator):
    cdef bitgen_t* rng = _bitgen(bit_generator)
    cdef Py_ssize_t i, n = truth.shape[0]
    out = np.empty(n, dtype=np.uint8)
    cdef uint8_t[::1] o = out
    with bit_generator.lock, nogil:
        for i in range(n):
            if rng.next_double(rng.state) < p:
                o[i] = truth[i]
            else:
                o[i] = rng.next_double(rng.state) < q
    return out


def rr_counts(const int64_t[::1] cells, Py_ssize_t n_cells, double p, double q, object bit_generator):
    cdef bitgen_t* rng = _bitgen(bit_generator)
    cdef Py_ssize_t k, c, n = cells.shape[0]
    cdef int64_t cell
    cdef uint8_t bit
    counts = np.zeros(n_cells, dtype=np.int64)
    cdef int64_t[::1] acc = counts
    with bit_generator.lock, nogil:
        for k in range(n):
            cell = cells[k]
            for c in range(n_cells):
                if rng.next_double(rng.state) < p:
                    bit = cell == c
                else:
                    bit = rng.next_double(rng.state) < q
                acc[c] += bit
    return counts
