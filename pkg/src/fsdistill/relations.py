"""Plain-numpy relation kernels shared by losses, clustering, and diagnostics.

These operate on raw arrays and carry no differentiation state; the tensor
module wraps the ones that need gradients.
"""
from __future__ import annotations

import numpy as np

COSINE_NORM_FLOOR = 1e-12
EUCLIDEAN_GRAD_FLOOR = 1e-12


def euclidean_pairs(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All pairwise Euclidean distances between rows of a [n,d] and b [m,d].

    Returns (dist [n,m], diff [n,m,d]); diff is kept because the distance
    gradient reuses it.
    """
    diff = a[:, None, :] - b[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return dist, diff


def cosine_pairs(a: np.ndarray, b: np.ndarray,
                 floor: float = COSINE_NORM_FLOOR) -> np.ndarray:
    """All pairwise cosine similarities between rows of a and b.

    Norms are floored at `floor` so zero vectors yield similarity 0 instead
    of a division error.
    """
    na = np.maximum(np.linalg.norm(a, axis=1), floor)
    nb = np.maximum(np.linalg.norm(b, axis=1), floor)
    return (a @ b.T) / (na[:, None] * nb[None, :])


def self_euclidean(a: np.ndarray) -> np.ndarray:
    """Pairwise distances among rows of a single matrix [n,d] -> [n,n]."""
    return euclidean_pairs(a, a)[0]


def self_cosine(a: np.ndarray, floor: float = COSINE_NORM_FLOOR) -> np.ndarray:
    return cosine_pairs(a, a, floor)


def batched_self_euclidean(x: np.ndarray) -> np.ndarray:
    """Within-sample pairwise distances for x [b,w,d] -> [b,w,w]."""
    diff = x[:, :, None, :] - x[:, None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def batched_self_cosine(x: np.ndarray,
                        floor: float = COSINE_NORM_FLOOR) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(x, axis=-1), floor)
    prods = x @ np.swapaxes(x, -1, -2)
    return prods / (norms[:, :, None] * norms[:, None, :])


def squared_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances via the expanded inner-product form.

    Cheaper than materialising the [n,m,d] difference tensor; used where n
    is large (cluster assignment). Clipped at 0 against cancellation.
    """
    aa = np.sum(a * a, axis=1)
    bb = np.sum(b * b, axis=1)
    sq = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    return np.maximum(sq, 0.0)
