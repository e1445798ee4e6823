"""HSIC and linear CKA, differentiable end to end.

Feature matrices are example-by-feature: N rows of examples, so the Gram is
the N x N matrix of example dot products. CKA is the centered-Gram cosine

    CKA(E1, E2) = HSIC(K, L) / sqrt(HSIC(K, K) * HSIC(L, L))

with HSIC(K, L) = tr(K C L C) / (N - 1)^2 and C = I - J/N. Because the
(N-1)^2 factors cancel in the ratio, the CKA path works directly with the
unnormalised centered-Gram inner products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

# Self-HSIC below this is treated as a degenerate (constant) feature set.
EPS_DENOMINATOR = 1e-12
# Floor applied to CKA before it enters a log term.
EPS_CKA = 1e-7


class DegenerateFeatures(ValueError):
    """CKA denominator vanished: feature rows are (numerically) all equal."""


def gram(e: Tensor) -> Tensor:
    """Example-level Gram K = E E^T for an [n, f] feature matrix."""
    if e.ndim != 2:
        raise ShapeError("gram expects an [n, f] matrix")
    if e.shape[0] < 2:
        raise ShapeError("gram needs at least 2 examples")
    return T.matmul(e, T.transpose(e))


def hsic(k: Tensor, l: Tensor) -> Tensor:
    """tr(K C L C) / (N-1)^2 via double-centered Grams."""
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ShapeError("hsic expects square K")
    if k.shape != l.shape:
        raise ShapeError(f"hsic: K {k.shape} and L {l.shape} differ")
    n = k.shape[0]
    if n < 2:
        raise ShapeError("hsic needs N >= 2")
    kc = T.center_gram(k)
    lc = T.center_gram(l)
    prod = T.mul(kc, T.transpose(lc))
    return T.scale(T.tsum(prod), 1.0 / (n - 1) ** 2)


def cka(e1: Tensor, e2: Tensor) -> Tensor:
    """Linear CKA between two [n, f] feature matrices (f may differ)."""
    if e1.ndim != 2 or e2.ndim != 2:
        raise ShapeError("cka expects 2-D feature matrices")
    if e1.shape[0] != e2.shape[0]:
        raise ShapeError("cka: example counts differ")
    n = e1.shape[0]
    if n < 2:
        raise ShapeError("cka needs N >= 2")
    kc = T.center_gram(gram(e1))
    lc = T.center_gram(gram(e2))
    cross = T.tsum(T.mul(kc, lc))
    sxx = T.tsum(T.mul(kc, kc))
    syy = T.tsum(T.mul(lc, lc))
    norm = (n - 1) ** 2
    if sxx.item() / norm < EPS_DENOMINATOR or syy.item() / norm < EPS_DENOMINATOR:
        raise DegenerateFeatures(
            "centered Gram vanished; feature rows are all identical")
    return T.div(cross, T.sqrt(T.mul(sxx, syy)))


@dataclass
class PerSampleCka:
    """Token-level CKA per sample.

    `values` holds one scalar per valid sample (order of `indices`);
    samples whose token matrix is degenerate are flagged in `degenerate`.
    """
    values: Tensor
    indices: np.ndarray
    degenerate: np.ndarray

    @property
    def n_valid(self) -> int:
        return int(self.indices.size)


def cka_per_sample(ht: Tensor, hs: Tensor) -> PerSampleCka:
    """CKA per sample between [b, w, d] tensors, tokens acting as examples."""
    if ht.ndim != 3 or hs.ndim != 3:
        raise ShapeError("cka_per_sample expects [b, w, d] tensors")
    if ht.shape != hs.shape:
        raise ShapeError(f"cka_per_sample: shapes {ht.shape} != {hs.shape}")
    b, w, _ = ht.shape
    if w < 2:
        raise ShapeError("cka_per_sample needs at least 2 tokens per sample")

    kc = T.center_gram(T.matmul_batched(ht, T.permute(ht, (0, 2, 1))))
    lc = T.center_gram(T.matmul_batched(hs, T.permute(hs, (0, 2, 1))))
    cross = T.sum_last2(T.mul(kc, lc))
    sxx = T.sum_last2(T.mul(kc, kc))
    syy = T.sum_last2(T.mul(lc, lc))

    norm = (w - 1) ** 2
    valid = ((sxx.data / norm) >= EPS_DENOMINATOR) & \
            ((syy.data / norm) >= EPS_DENOMINATOR)
    indices = np.flatnonzero(valid)
    degenerate = np.flatnonzero(~valid)
    if indices.size == 0:
        return PerSampleCka(Tensor(np.zeros(0)), indices, degenerate)
    if indices.size < b:
        cross = T.take_indices(cross, indices)
        sxx = T.take_indices(sxx, indices)
        syy = T.take_indices(syy, indices)
    values = T.div(cross, T.sqrt(T.mul(sxx, syy)))
    return PerSampleCka(values, indices, degenerate)


def log_cka_clamped(value: Tensor, floor: float = EPS_CKA) -> Tensor:
    """log of CKA clamped into [floor, 1], finite for any valid input."""
    return T.log(T.clamp(value, floor, 1.0))
