"""Special functions used across the package.

The modified Bessel function I0 is evaluated here directly; the chi-square and
F survival functions are thin wrappers over the regularized incomplete gamma
and beta functions from :mod:`scipy.special`.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp

_SERIES_LIMIT = 30.0
_SERIES_TERMS = 90
_ASYMPTOTIC_TERMS = 20


def _i0_series(z: np.ndarray) -> np.ndarray:
    # sum_k (z^2/4)^k / (k!)^2, terms accumulated by ratio
    q = 0.25 * z * z
    term = np.ones_like(z)
    total = np.ones_like(z)
    for k in range(1, _SERIES_TERMS):
        term = term * q / (k * k)
        total = total + term
        if np.all(term <= 1e-17 * total):
            break
    return total


def _i0_asymptotic(z: np.ndarray) -> np.ndarray:
    # e^z / sqrt(2 pi z) * sum_k [(2k-1)!!]^2 / (k! 8^k z^k)
    term = np.ones_like(z)
    total = np.ones_like(z)
    for k in range(1, _ASYMPTOTIC_TERMS):
        term = term * (2 * k - 1) ** 2 / (k * 8.0 * z)
        total = total + term
    return np.exp(z) / np.sqrt(2.0 * math.pi * z) * total


def bessel_i0(z):
    """Modified Bessel function of the first kind, order zero.

    Power series for ``|z| <= 30``, asymptotic expansion beyond. Accepts
    scalars or arrays; returns the same shape.
    """
    arr = np.abs(np.asarray(z, dtype=float))
    out = np.empty_like(arr)
    small = arr <= _SERIES_LIMIT
    if np.any(small):
        out[small] = _i0_series(arr[small])
    if np.any(~small):
        out[~small] = _i0_asymptotic(arr[~small])
    if out.ndim == 0:
        return float(out)
    return out


def chi2_survival(x, df):
    """P(X > x) for X ~ chi-square(df)."""
    if np.any(np.asarray(df) <= 0):
        raise ValueError("degrees of freedom must be positive")
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    out = _sp.gammaincc(0.5 * np.asarray(df, dtype=float), 0.5 * x)
    return float(out) if np.ndim(out) == 0 else out


def f_survival(x, dfn, dfd):
    """P(X > x) for X ~ F(dfn, dfd)."""
    if dfn <= 0 or dfd <= 0:
        raise ValueError("degrees of freedom must be positive")
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    # P(F > x) = I_{dfd/(dfd + dfn x)}(dfd/2, dfn/2)
    out = _sp.betainc(0.5 * dfd, 0.5 * dfn, dfd / (dfd + dfn * x))
    return float(out) if np.ndim(out) == 0 else out
