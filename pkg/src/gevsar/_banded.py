"""Tridiagonal LU factorization and solves (Thomas algorithm with
partial pivoting, LAPACK gttrf/gtts2 style).

Row interchanges introduce a second superdiagonal of fill-in, which is the
price for staying stable on indefinite matrices (the SAR matrix with
kappa^2 < 2 is indefinite but generically nonsingular).
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def gttrf(dl, d, du):
    """Factor a tridiagonal matrix in place.

    dl[1:] holds the subdiagonal, d the diagonal, du[:-1] the superdiagonal.
    Returns (dl, d, du, du2, ipiv) where dl carries the multipliers, d the
    pivots, du/du2 the first/second superdiagonals of U, and ipiv the row
    interchange flags (ipiv[i] == 1 means rows i and i+1 were swapped).
    """
    n = d.shape[0]
    du2 = np.zeros(max(n - 2, 0))
    ipiv = np.zeros(n, dtype=np.int64)
    for i in range(n - 1):
        sub = dl[i + 1]
        if abs(d[i]) >= abs(sub):
            if d[i] != 0.0:
                fact = sub / d[i]
                dl[i + 1] = fact
                d[i + 1] = d[i + 1] - fact * du[i]
        else:
            fact = d[i] / sub
            d[i] = sub
            dl[i + 1] = fact
            temp = du[i]
            du[i] = d[i + 1]
            d[i + 1] = temp - fact * d[i + 1]
            if i < n - 2:
                du2[i] = du[i + 1]
                du[i + 1] = -fact * du[i + 1]
            ipiv[i] = 1
    return dl, d, du, du2, ipiv


@njit(cache=True)
def gtts2(dl, d, du, du2, ipiv, b):
    """Solve with a `gttrf` factorization; b has shape (n, k)."""
    n, k = b.shape
    x = b.copy()
    for j in range(k):
        for i in range(n - 1):
            if ipiv[i] == 0:
                x[i + 1, j] = x[i + 1, j] - dl[i + 1] * x[i, j]
            else:
                temp = x[i, j]
                x[i, j] = x[i + 1, j]
                x[i + 1, j] = temp - dl[i + 1] * x[i, j]
        x[n - 1, j] = x[n - 1, j] / d[n - 1]
        if n > 1:
            x[n - 2, j] = (x[n - 2, j] - du[n - 2] * x[n - 1, j]) / d[n - 2]
        for i in range(n - 3, -1, -1):
            x[i, j] = (x[i, j] - du[i] * x[i + 1, j] - du2[i] * x[i + 2, j]) / d[i]
    return x


@njit(cache=True)
def tridiag_matvec(dl, d, du, v):
    """Product of the tridiagonal matrix (dl, d, du) with columns of v."""
    n, k = v.shape
    out = np.empty((n, k))
    for j in range(k):
        for i in range(n):
            acc = d[i] * v[i, j]
            if i > 0:
                acc += dl[i] * v[i - 1, j]
            if i < n - 1:
                acc += du[i] * v[i + 1, j]
            out[i, j] = acc
    return out
