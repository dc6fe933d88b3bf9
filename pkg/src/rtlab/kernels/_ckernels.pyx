# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see ``_fallback`` for the contract."""
from libc.math cimport exp, INFINITY

import numpy as np


def update_tile(const double[:, ::1] q, const double[:, ::1] k, const double[:, ::1] v,
                bias, double[::1] m, double[::1] l, double[:, ::1] o):
    cdef Py_ssize_t nq = q.shape[0], nk = k.shape[0], d = q.shape[1], dv = v.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double s, acc, m_new, rescale, w, l_i
    cdef const double[:, ::1] b
    cdef bint has_bias = bias is not None
    cdef double[::1] row = np.empty(nk, dtype=np.float64)
    if has_bias:
        b = bias
    for i in range(nq):
        m_new = m[i]
        for j in range(nk):
            acc = 0.0
            for c in range(d):
                acc += q[i, c] * k[j, c]
            if has_bias:
                acc += b[i, j]
            row[j] = acc
            if acc > m_new:
                m_new = acc
        if m[i] == -INFINITY:
            rescale = 0.0
        else:
            rescale = exp(m[i] - m_new)
        l_i = l[i] * rescale
        for c in range(dv):
            o[i, c] *= rescale
        for j in range(nk):
            w = exp(row[j] - m_new)
            l_i += w
            for c in range(dv):
                o[i, c] += w * v[j, c]
        l[i] = l_i
        m[i] = m_new

