"""Histogram Otsu threshold shared by the STXM and neutron pipelines."""

from __future__ import annotations

import numpy as np


class OtsuUndefined(ValueError):
    """All values equal: no split exists."""


def otsu_from_histogram(counts) -> int:
    """Index ``k`` maximizing between-class variance for classes ``[0..k]`` and ``[k+1..]``.

    Bin positions are taken as ``0..n-1``; the split is invariant to any
    increasing affine relabelling of bin centres.  Ties go to the lowest
    index.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError("need a 1D histogram with at least two bins")
    centers = np.arange(counts.size, dtype=np.float64)
    w0 = np.cumsum(counts)[:-1]
    w1 = counts.sum() - w0
    m = np.cumsum(counts * centers)[:-1]
    mt = (counts * centers).sum()
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        raise OtsuUndefined("histogram has a single occupied bin")
    mu0 = np.where(valid, m / np.where(w0 > 0, w0, 1), 0.0)
    mu1 = np.where(valid, (mt - m) / np.where(w1 > 0, w1, 1), 0.0)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    return int(np.argmax(between))


def otsu_threshold(values, nbins: int = 256) -> float:
    """Threshold on a ``nbins`` histogram over ``[min, max]``; upper class is ``values >= t``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise OtsuUndefined("no finite values")
    lo, hi = v.min(), v.max()
    if not hi > lo:
        raise OtsuUndefined("constant input")
    counts, edges = np.histogram(v, bins=nbins, range=(lo, hi))
    k = otsu_from_histogram(counts)
    return float(edges[k + 1])
