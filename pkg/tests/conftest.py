"""Shared oracles and helpers for the test suite.

Oracles here are deliberately written in the most naive form available
(explicit loops, high-precision arithmetic) and never call the code paths
they are used to check.
"""
from __future__ import annotations

import numpy as np


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-relative error between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def softmax_oracle(row: np.ndarray, tau: float) -> np.ndarray:
    """Definition-level softmax with high-precision intermediates."""
    import mpmath

    with mpmath.workdps(40):
        vals = [mpmath.e ** (mpmath.mpf(float(v)) / mpmath.mpf(tau)) for v in row]
        total = mpmath.fsum(vals)
        return np.array([float(v / total) for v in vals])


def hsic_oracle(k: np.ndarray, l: np.ndarray) -> float:
    """Brute-force HSIC: build C explicitly, expand the trace as a double sum."""
    n = k.shape[0]
    c = np.eye(n) - np.ones((n, n)) / n
    kc = c @ k @ c  # verbatim tr(K C L C) after cyclic shift
    lc = l
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += kc[i, j] * lc[j, i]
    return total / (n - 1) ** 2


def cka_oracle(e1: np.ndarray, e2: np.ndarray) -> float:
    """CKA from the double-sum HSIC oracle on example-level Grams."""
    k = e1 @ e1.T
    l = e2 @ e2.T
    num = hsic_oracle(k, l)
    den = np.sqrt(hsic_oracle(k, k) * hsic_oracle(l, l))
    return num / den


def random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))
