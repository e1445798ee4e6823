"""Distillation objectives.

Covers the base objectives (temperature-softened KL plus cross-entropy
interpolation) and the three structure losses:

  * intra: per-sample token-level CKA, -mean log,
  * local: batch-level CKA between flattened penultimate features,
  * global: memory-bank terms - centroid-structure CKA plus the
    feature-to-centroid distance matching under Euclidean and cosine
    relations, interpolated by gamma_m.

Teacher-side inputs are always treated as constants: they are detached
before entering any graph, so no gradient can reach teacher parameters or
the teacher memory.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import relations
from . import similarity as S
from . import tensor as T
from .tensor import ShapeError, Tensor


class DegenerateBatch(ValueError):
    """Every sample in the batch had a degenerate token matrix."""


class LossKind(enum.Enum):
    NODS = "nods"
    VKD = "vkd"
    INTRA = "i"
    LOCAL = "l"
    GLOBAL = "g"
    INTRA_LOCAL = "il"
    INTRA_LOCAL_GLOBAL = "ilg"

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        try:
            return cls(text.strip().lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown loss kind {text!r} (valid: {valid})")

    @property
    def uses_memory(self) -> bool:
        return self in (LossKind.GLOBAL, LossKind.INTRA_LOCAL_GLOBAL)

    @property
    def uses_structure(self) -> bool:
        return self not in (LossKind.NODS, LossKind.VKD)


@dataclass
class LossWeights:
    """Hyperparameters of the combined objective.

    alpha interpolates cross-entropy against the KL term, tau is the softmax
    temperature, beta scales the selected structure loss, gamma_m
    interpolates the Euclidean/cosine memory distance terms and the
    gamma_i/l/g weights combine the integrated losses.
    """
    alpha: float = 0.5
    tau: float = 5.0
    beta: float = 1.0
    gamma_m: float = 0.5
    gamma_i: float = 1.0
    gamma_l: float = 1.0
    gamma_g: float = 1.0
    scale_kld_by_tau_sq: bool = False

    def validate(self, kind: "LossKind | None" = None) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.beta < 0.0:
            raise ValueError("beta must be nonnegative")
        if not 0.0 <= self.gamma_m <= 1.0:
            raise ValueError("gamma_m must lie in [0, 1]")
        for name in ("gamma_i", "gamma_l", "gamma_g"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if kind == LossKind.INTRA_LOCAL and self.gamma_g != 0.0:
            raise ValueError("gamma_g must be 0 for the intra+local kind")


def kld_loss(teacher_logits: Tensor, student_logits: Tensor,
             tau: float, scale_by_tau_sq: bool = False) -> Tensor:
    """Batch-summed KL(teacher || student) over temperature-softened rows.

    The teacher side is a constant; only the student logits receive
    gradients. The optional tau^2 factor (off by default) exists solely for
    comparability with distillation codebases that apply it.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError("kld_loss: logit shapes differ")
    if teacher_logits.ndim != 2:
        raise ShapeError("kld_loss expects [batch, classes] logits")
    if tau <= 0:
        raise ValueError("tau must be positive")
    t_probs = T.softmax_rows(teacher_logits.detach(), tau).data
    t_log = np.log(np.maximum(t_probs, 1e-300))
    entropy_term = float(np.sum(t_probs * t_log))
    s_logprobs = T.log_softmax_rows(student_logits, tau)
    cross = T.tsum(T.mul(Tensor(t_probs), s_logprobs))
    out = T.add_scalar(T.scale(cross, -1.0), entropy_term)
    if scale_by_tau_sq:
        out = T.scale(out, tau * tau)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels."""
    logp = T.log_softmax_rows(logits, 1.0)
    picked = T.take_per_row(logp, np.asarray(labels))
    return T.scale(T.mean(picked), -1.0)


def vkd_loss(ce: Tensor, kld: Tensor, alpha: float) -> Tensor:
    """alpha * CE + (1 - alpha) * KLD."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return T.add(T.scale(ce, alpha), T.scale(kld, 1.0 - alpha))


def fsd_intra(ht: Tensor, hs: Tensor) -> Tensor:
    """-mean over samples of log token-level CKA; teacher side constant.

    Samples with degenerate token matrices are dropped and the divisor is
    reduced accordingly.
    """
    res = S.cka_per_sample(ht.detach(), hs)
    if res.n_valid == 0:
        raise DegenerateBatch("all samples have degenerate token matrices")
    logs = S.log_cka_clamped(res.values)
    return T.scale(T.tsum(logs), -1.0 / res.n_valid)


def fsd_local(ht: Tensor, hs: Tensor) -> Tensor:
    """-log CKA between flattened [b, w*d] features; teacher side constant."""
    if ht.shape != hs.shape:
        raise ShapeError("fsd_local: shapes differ")
    return T.scale(S.log_cka_clamped(S.cka(hs, ht.detach())), -1.0)


def memory_structure_loss(mt: Tensor, ms: Tensor) -> Tensor:
    """-log CKA between teacher (frozen) and student centroid banks."""
    if mt.shape != ms.shape:
        raise ShapeError("memory_structure_loss: bank shapes differ")
    return T.scale(S.log_cka_clamped(S.cka(mt.detach(), ms)), -1.0)


def memory_hidden_loss(ht: Tensor, hs: Tensor, mt: Tensor, ms: Tensor,
                       psi: str) -> Tensor:
    """Mean squared mismatch of feature-to-centroid relations.

    psi selects the relation: 'euclidean' distance or 'cosine' similarity
    (cosine norms floored so zero vectors stay finite). Gradients reach the
    student features and student memory only.
    """
    if psi not in ("euclidean", "cosine"):
        raise ValueError("psi must be 'euclidean' or 'cosine'")
    if ht.shape != hs.shape:
        raise ShapeError("memory_hidden_loss: feature shapes differ")
    if mt.shape != ms.shape:
        raise ShapeError("memory_hidden_loss: bank shapes differ")
    if ht.shape[1] != mt.shape[1]:
        raise ShapeError("memory_hidden_loss: feature/memory widths differ")
    b, c = ht.shape[0], mt.shape[0]
    if psi == "euclidean":
        teacher = relations.euclidean_pairs(ht.data, mt.data)[0]
        student = T.pairwise_euclidean(hs, ms)
    else:
        teacher = relations.cosine_pairs(ht.data, mt.data)
        student = T.pairwise_cosine(hs, ms)
    diff = T.sub(Tensor(teacher), student)
    return T.scale(T.tsum(T.mul(diff, diff)), 1.0 / (b * c))


def fsd_global(ht: Tensor, hs: Tensor, mt: Tensor, ms: Tensor,
               gamma_m: float) -> Tensor:
    """gamma_m * Euclidean relation term + (1-gamma_m) * cosine term
    + centroid-structure CKA term."""
    if not 0.0 <= gamma_m <= 1.0:
        raise ValueError("gamma_m must lie in [0, 1]")
    f_e = memory_hidden_loss(ht, hs, mt, ms, "euclidean")
    f_c = memory_hidden_loss(ht, hs, mt, ms, "cosine")
    f_mm = memory_structure_loss(mt, ms)
    return T.add(T.add(T.scale(f_e, gamma_m), T.scale(f_c, 1.0 - gamma_m)),
                 f_mm)


def fsd_integrated(li: Tensor, ll: Tensor, lg: Tensor,
                   gamma_i: float, gamma_l: float, gamma_g: float) -> Tensor:
    """Weighted sum of the three structure losses."""
    for name, g in (("gamma_i", gamma_i), ("gamma_l", gamma_l),
                    ("gamma_g", gamma_g)):
        if g < 0:
            raise ValueError(f"{name} must be nonnegative")
    out = T.add(T.scale(li, gamma_i), T.scale(ll, gamma_l))
    return T.add(out, T.scale(lg, gamma_g))


def total_loss(vkd: Tensor, structure: Tensor, beta: float) -> Tensor:
    """vkd + beta * structure."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return T.add(vkd, T.scale(structure, beta))
