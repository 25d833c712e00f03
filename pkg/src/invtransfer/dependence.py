"""Unbiased distance covariance (U-statistic) and its gradient."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InsufficientSamplesError, ShapeError


@dataclass(frozen=True)
class DcovResult:
    value: float  # unbiased, so it can dip slightly below zero
    n: int

    def __float__(self):
        return self.value


def _as_samples(Z, Y):
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if Z.ndim != 2 or Y.ndim != 2:
        raise ShapeError("samples must be vectors or matrices")
    if Z.shape[0] != Y.shape[0]:
        raise ShapeError(f"row counts differ: {Z.shape[0]} vs {Y.shape[0]}")
    n = Z.shape[0]
    if n < 4:
        raise InsufficientSamplesError(f"distance covariance U-statistic needs n >= 4, got {n}")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Y))):
        raise ValueError("samples must be finite")
    return Z, Y


def pairwise_distances(Z):
    return cdist(Z, Z)


def quadruple_kernel(a, b):
    """Symmetric kernel on four points given their 4x4 distance matrices."""
    off = ~np.eye(4, dtype=bool)
    t1 = (a * b)[off].sum() / 4.0
    t2 = a[off].sum() * b[off].sum() / 24.0
    t3 = (a.sum(axis=1) * b.sum(axis=1)).sum() / 4.0
    return t1 + t2 - t3


def dcov_brute(Z, Y) -> DcovResult:
    """Average of the quadruple kernel over all 4-subsets; O(n^4)."""
    Z, Y = _as_samples(Z, Y)
    n = Z.shape[0]
    a, b = pairwise_distances(Z), pairwise_distances(Y)
    total = 0.0
    for idx in itertools.combinations(range(n), 4):
        ix = np.ix_(idx, idx)
        total += quadruple_kernel(a[ix], b[ix])
    return DcovResult(total / math.comb(n, 4), n)


def u_center(a):
    n = a.shape[0]
    row = a.sum(axis=1)
    out = a - row[:, None] / (n - 2) - row[None, :] / (n - 2) + row.sum() / ((n - 1) * (n - 2))
    np.fill_diagonal(out, 0.0)
    return out


def dcov_fast(Z, Y) -> DcovResult:
    """Same statistic via U-centered distance matrices; O(n^2 (dz + dy))."""
    Z, Y = _as_samples(Z, Y)
    n = Z.shape[0]
    A = u_center(pairwise_distances(Z))
    B = u_center(pairwise_distances(Y))
    return DcovResult(float((A * B).sum() / (n * (n - 3))), n)


def _grad_one_side(Z, Bt, n):
    diff = Z[:, None, :] - Z[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(dist > 0, Bt / dist, 0.0)
    # each unordered pair appears twice in the ordered sum
    return 2.0 / (n * (n - 3)) * (w[:, :, None] * diff).sum(axis=1)


def dcov_grad(Z, Y):
    """Gradient of ``dcov_fast`` with respect to every sample entry.

    Uses that the statistic is linear in either raw distance matrix once the
    other one is U-centered.  Coincident points contribute zero.
    """
    Z, Y = _as_samples(Z, Y)
    n = Z.shape[0]
    A = u_center(pairwise_distances(Z))
    B = u_center(pairwise_distances(Y))
    return _grad_one_side(Z, B, n), _grad_one_side(Y, A, n)


def dcov_value_and_grad(Z, Y):
    """``(value, dV/dZ, dV/dY)`` sharing one set of distance matrices."""
    Z, Y = _as_samples(Z, Y)
    n = Z.shape[0]
    A = u_center(pairwise_distances(Z))
    B = u_center(pairwise_distances(Y))
    value = float((A * B).sum() / (n * (n - 3)))
    return value, _grad_one_side(Z, B, n), _grad_one_side(Y, A, n)
