# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled 1-D optimal-coupling cost kernels (two-pointer quantile merge)."""

from libc.math cimport fabs, pow

import numpy as np


def coupling_cost_sorted(const double[::1] xa, const double[::1] ca,
                         const double[::1] xb, const double[::1] cb, double p):
    """W_p^p between sorted weighted atom sets via the quantile coupling."""
    cdef Py_ssize_t i = 0, j = 0, na = xa.shape[0], nb = xb.shape[0]
    cdef double last = 0.0, hi, d, cost = 0.0
    cdef int ip = 0
    if p == 1.0:
        ip = 1
    elif p == 2.0:
        ip = 2
    while i < na and j < nb:
        hi = ca[i] if ca[i] < cb[j] else cb[j]
        if hi > last:
            d = fabs(xa[i] - xb[j])
            if ip == 1:
                cost += (hi - last) * d
            elif ip == 2:
                cost += (hi - last) * d * d
            else:
                cost += (hi - last) * pow(d, p)
            last = hi
        if ca[i] <= hi:
            i += 1
        if cb[j] <= hi:
            j += 1
    return cost


def coupling_cost_uniform(const double[::1] xa, const double[::1] xb, double p):
    """W_p^p between two sorted equal-count uniform-weight atom sets."""
    cdef Py_ssize_t i, n = xa.shape[0]
    cdef double d, cost = 0.0
    cdef int ip = 0
    if p == 1.0:
        ip = 1
    elif p == 2.0:
        ip = 2
    for i in range(n):
        d = fabs(xa[i] - xb[i])
        if ip == 1:
            cost += d
        elif ip == 2:
            cost += d * d
        else:
            cost += pow(d, p)
    return cost / n
