"""NumPy implementation of the 1-D optimal-coupling cost kernels.

Both kernels evaluate the p-th power transport cost of the order-statistics
(quantile) coupling, which is optimal on the line for every convex cost.
Inputs are pre-sorted atom positions with inclusive cumulative weights; the
last cumulative weight of each side must be equal (callers normalise to 1).
"""

import numpy as np


def coupling_cost_sorted(xa, ca, xb, cb, p):
    """W_p^p between sorted weighted atom sets via the quantile coupling.

    Parameters
    ----------
    xa, xb : ndarray
        Atom positions, ascending.
    ca, cb : ndarray
        Inclusive cumulative weights aligned with ``xa``/``xb``.
    p : float
        Cost exponent, >= 1.

    Returns
    -------
    float
        Integral over quantile levels of |F_a^{-1}(s) - F_b^{-1}(s)|^p.
    """
    cuts = np.union1d(ca, cb)
    seg = np.diff(cuts, prepend=0.0)
    mids = cuts - 0.5 * seg
    ia = np.searchsorted(ca, mids, side="left")
    ib = np.searchsorted(cb, mids, side="left")
    ia = np.minimum(ia, len(xa) - 1)
    ib = np.minimum(ib, len(xb) - 1)
    diff = np.abs(xa[ia] - xb[ib])
    if p == 1.0:
        return float(np.dot(seg, diff))
    if p == 2.0:
        return float(np.dot(seg, diff * diff))
    return float(np.dot(seg, diff**p))


def coupling_cost_uniform(xa, xb, p):
    """W_p^p between two sorted equal-count uniform-weight atom sets."""
    diff = np.abs(xa - xb)
    if p == 1.0:
        return float(np.mean(diff))
    if p == 2.0:
        return float(np.mean(diff * diff))
    return float(np.mean(diff**p))
