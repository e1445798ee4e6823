"""Centroid memory banks and the unsupervised post-training stage.

The teacher bank is produced by Lloyd's k-means over the teacher's
penultimate features of the full training set and frozen afterwards; the
student bank starts from small Gaussian noise and trains with the student.

Determinism rules: centroid init samples distinct feature rows, assignment
ties break toward the lowest centroid index, and an emptied cluster is
re-seeded with the point farthest from its currently assigned centroid.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import relations
from .tensor import NumericalError, Tensor

DEFAULT_KMEANS_EPOCHS = 3
STUDENT_INIT_STD = 0.02


@dataclass
class MemoryBank:
    centroids: Tensor
    trainable: bool
    source: str  # "teacher" | "student"

    def __post_init__(self):
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValueError("memory bank needs at least 2 centroid rows")
        if self.source not in ("teacher", "student"):
            raise ValueError("source must be 'teacher' or 'student'")
        self.centroids.requires_grad = self.trainable

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def width(self) -> int:
        return self.centroids.shape[1]


@dataclass
class ClusteringReport:
    objectives: list[float] = field(default_factory=list)
    counts: list[np.ndarray] = field(default_factory=list)
    epochs_run: int = 0


def assign(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid index per feature row; ties pick the lowest index."""
    if features.shape[1] != centroids.shape[1]:
        raise ValueError("feature/centroid widths differ")
    sq = relations.squared_distance_matrix(features, centroids)
    return np.argmin(sq, axis=1)  # argmin returns the first (lowest) index


def update(features: np.ndarray, assignment: np.ndarray,
           n_centroids: int) -> np.ndarray:
    """Mean-update step; empty clusters re-seed at the globally farthest point
    from its currently assigned centroid."""
    width = features.shape[1]
    centroids = np.zeros((n_centroids, width))
    counts = np.bincount(assignment, minlength=n_centroids)
    for j in range(n_centroids):
        if counts[j] > 0:
            centroids[j] = features[assignment == j].mean(axis=0)

    empties = np.flatnonzero(counts == 0)
    if empties.size:
        filled = centroids.copy()
        dist_to_own = np.linalg.norm(
            features - filled[assignment], axis=1)
        # farthest first; stable order keeps this deterministic
        order = np.argsort(-dist_to_own, kind="stable")
        taken = 0
        for j in empties:
            centroids[j] = features[order[taken]]
            taken += 1
    return centroids


def clustering_objective(features: np.ndarray, centroids: np.ndarray,
                         assignment: np.ndarray) -> float:
    diff = features - centroids[assignment]
    return float(np.sum(diff * diff))


def post_train_teacher_memory(features, n_centroids: int,
                              epochs: int = DEFAULT_KMEANS_EPOCHS,
                              seed: int = 0) -> tuple[MemoryBank, ClusteringReport]:
    """Lloyd's k-means over teacher features; returns a frozen bank.

    One epoch is a full assign + update pass. Initial centroids are
    n_centroids distinct feature rows sampled uniformly at random.
    """
    feats = features.data if isinstance(features, Tensor) else \
        np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError("features must be [n, width]")
    if not np.all(np.isfinite(feats)):
        raise NumericalError("non-finite features passed to clustering")
    n = feats.shape[0]
    if n_centroids < 2:
        raise ValueError("need at least 2 centroids")
    if n < n_centroids:
        raise ValueError(f"cannot form {n_centroids} clusters from {n} points")

    rng = np.random.default_rng(seed)
    pick = rng.choice(n, size=n_centroids, replace=False)
    centroids = feats[pick].copy()

    report = ClusteringReport()
    for _ in range(epochs):
        a = assign(feats, centroids)
        report.objectives.append(clustering_objective(feats, centroids, a))
        report.counts.append(np.bincount(a, minlength=n_centroids))
        centroids = update(feats, a, n_centroids)
        report.epochs_run += 1

    bank = MemoryBank(Tensor(centroids), trainable=False, source="teacher")
    return bank, report


def init_student_memory(n_centroids: int, width: int, seed: int,
                        std: float = STUDENT_INIT_STD) -> MemoryBank:
    """Trainable bank with i.i.d. Normal(0, std^2) entries."""
    if n_centroids < 2:
        raise ValueError("need at least 2 centroids")
    rng = np.random.default_rng(seed)
    rows = rng.normal(0.0, std, size=(n_centroids, width))
    return MemoryBank(Tensor(rows, requires_grad=True), trainable=True,
                      source="student")
