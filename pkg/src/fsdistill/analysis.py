"""Diagnostics: relation difference, restoration rate, CKA heatmaps, ranks.

All functions here run on detached features in eval mode; nothing is
differentiated.

Relation difference measures how well pairwise relations survived transfer:

    inter: mean_ij |psi(Ht_i, Ht_j) - psi(Hs_i, Hs_j)|          (/ B^2)
    intra: mean over samples of token-pair discrepancies        (/ W^2 B)

with psi either Euclidean distance or cosine similarity. Restoration rate
scores student predictions against teacher predictions used as the ground
truth. Heatmaps evaluate CKA between the teacher's features on batch i and
another model's features on batch j over a fixed mini-batch pool.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import relations
from .model import Batch, EncoderConfig, EncoderParams, forward
from .similarity import DegenerateFeatures, cka
from .tensor import Tensor

PSI_KINDS = ("euclidean", "cosine")


@dataclass
class RdSample:
    step: int
    rd_e_intra: float
    rd_e_inter: float
    rd_c_intra: float
    rd_c_inter: float

    def as_dict(self) -> dict:
        return {"step": self.step, "rd_e_intra": self.rd_e_intra,
                "rd_e_inter": self.rd_e_inter, "rd_c_intra": self.rd_c_intra,
                "rd_c_inter": self.rd_c_inter}


def _psi_matrix(flat: np.ndarray, psi: str) -> np.ndarray:
    if psi == "euclidean":
        return relations.self_euclidean(flat)
    if psi == "cosine":
        return relations.self_cosine(flat)
    raise ValueError(f"psi must be one of {PSI_KINDS}")


def relation_difference_inter(ht: np.ndarray, hs: np.ndarray,
                              psi: str) -> float:
    """Mean absolute pairwise-relation gap between [b, f] feature sets."""
    ht, hs = np.asarray(ht), np.asarray(hs)
    if ht.shape != hs.shape:
        raise ValueError("feature shapes differ")
    b = ht.shape[0]
    gap = np.abs(_psi_matrix(ht, psi) - _psi_matrix(hs, psi))
    return float(gap.sum() / (b * b))


def relation_difference_intra(ht: np.ndarray, hs: np.ndarray,
                              psi: str) -> float:
    """Token-pair relation gap for [b, w, d] features, summed over samples."""
    ht, hs = np.asarray(ht), np.asarray(hs)
    if ht.shape != hs.shape:
        raise ValueError("feature shapes differ")
    b, w, _ = ht.shape
    if psi == "euclidean":
        pt = relations.batched_self_euclidean(ht)
        ps = relations.batched_self_euclidean(hs)
    elif psi == "cosine":
        pt = relations.batched_self_cosine(ht)
        ps = relations.batched_self_cosine(hs)
    else:
        raise ValueError(f"psi must be one of {PSI_KINDS}")
    return float(np.abs(pt - ps).sum() / (w * w * b))


def _penultimate(config: EncoderConfig, params: EncoderParams,
                 batch: Batch) -> np.ndarray:
    _, h = forward(params, config, batch)
    return h.data


def rd_snapshot(teacher_config, teacher_params, student_config, student_params,
                eval_batches: list[Batch], step: int = 0) -> RdSample:
    """RD metrics averaged over a fixed evaluation batch set."""
    acc = {k: [] for k in ("ei", "ee", "ci", "ce")}
    for batch in eval_batches:
        ht = _penultimate(teacher_config, teacher_params, batch)
        hs = _penultimate(student_config, student_params, batch)
        ht_flat = ht.reshape(batch.size, -1)
        hs_flat = hs.reshape(batch.size, -1)
        acc["ei"].append(relation_difference_intra(ht, hs, "euclidean"))
        acc["ee"].append(relation_difference_inter(ht_flat, hs_flat, "euclidean"))
        acc["ci"].append(relation_difference_intra(ht, hs, "cosine"))
        acc["ce"].append(relation_difference_inter(ht_flat, hs_flat, "cosine"))
    return RdSample(step,
                    float(np.mean(acc["ei"])), float(np.mean(acc["ee"])),
                    float(np.mean(acc["ci"])), float(np.mean(acc["ce"])))


def rd_curve(teacher_config, teacher_params, student_config,
             checkpoints: list[tuple[int, EncoderParams]],
             eval_batches: list[Batch]) -> list[RdSample]:
    """Replay parameter snapshots into an RD-over-steps curve."""
    return [rd_snapshot(teacher_config, teacher_params, student_config,
                        params, eval_batches, step=step)
            for step, params in checkpoints]


# ---------------------------------------------------------------------------
# restoration rate


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    flagged: bool  # a zero denominator was reported as 0


@dataclass
class RestorationReport:
    per_class: dict[int, ClassScores]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    any_flagged: bool


def restoration_rate(teacher_preds, student_preds,
                     classes: list[int] | None = None) -> RestorationReport:
    """Precision/recall/F1 of student predictions against teacher predictions.

    Teacher predictions act as the ground truth. Macro scores are unweighted
    class means; zero-denominator cells score 0 and set the flag.
    """
    tp_arr = np.asarray(teacher_preds)
    sp_arr = np.asarray(student_preds)
    if tp_arr.shape != sp_arr.shape or tp_arr.ndim != 1:
        raise ValueError("prediction vectors must be 1-D and equal length")
    if classes is None:
        classes = sorted(set(tp_arr.tolist()) | set(sp_arr.tolist()))

    per_class: dict[int, ClassScores] = {}
    for cls in classes:
        tp = int(np.sum((tp_arr == cls) & (sp_arr == cls)))
        pred_pos = int(np.sum(sp_arr == cls))
        true_pos = int(np.sum(tp_arr == cls))
        flagged = pred_pos == 0 or true_pos == 0
        precision = tp / pred_pos if pred_pos else 0.0
        recall = tp / true_pos if true_pos else 0.0
        if precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1 = 0.0
            flagged = True
        per_class[int(cls)] = ClassScores(precision, recall, f1, flagged)

    scores = list(per_class.values())
    return RestorationReport(
        per_class,
        float(np.mean([s.precision for s in scores])),
        float(np.mean([s.recall for s in scores])),
        float(np.mean([s.f1 for s in scores])),
        any(s.flagged for s in scores),
    )


# ---------------------------------------------------------------------------
# heatmaps


@dataclass
class HeatmapMatrix:
    values: np.ndarray        # [p, p]; NaN marks a degenerate pixel
    pool_batches: int
    batch_size: int
    diagonal_average: float
    n_missing: int


def cka_heatmap(teacher_config, teacher_params, other_config, other_params,
                batch_pool: list[Batch]) -> HeatmapMatrix:
    """CKA of teacher features on batch i vs the other model's on batch j."""
    p = len(batch_pool)
    if p < 2:
        raise ValueError("need a pool of at least 2 batches")
    sizes = {b.size for b in batch_pool}
    if len(sizes) != 1 or min(sizes) < 2:
        raise ValueError("pool batches must share one size >= 2")

    t_feats = [_penultimate(teacher_config, teacher_params, b)
               .reshape(b.size, -1) for b in batch_pool]
    o_feats = [_penultimate(other_config, other_params, b)
               .reshape(b.size, -1) for b in batch_pool]

    values = np.full((p, p), np.nan)
    missing = 0
    for i in range(p):
        for j in range(p):
            try:
                values[i, j] = cka(Tensor(t_feats[i]),
                                   Tensor(o_feats[j])).item()
            except DegenerateFeatures:
                missing += 1
    diag = np.diagonal(values)
    good = diag[~np.isnan(diag)]
    diag_avg = float(good.mean()) if good.size else float("nan")
    return HeatmapMatrix(values, p, batch_pool[0].size, diag_avg, missing)


def build_batch_pool(dataset, pool_batches: int, batch_size: int,
                     seed: int) -> list[Batch]:
    """Seeded shuffle, then consecutive equal-size batches."""
    need = pool_batches * batch_size
    if dataset.size < need:
        raise ValueError(
            f"dataset of {dataset.size} cannot fill {pool_batches} x {batch_size}")
    order = np.random.default_rng(seed).permutation(dataset.size)[:need]
    return dataset.batches(batch_size, order=order)


# ---------------------------------------------------------------------------
# rank tables


def _rank_with_ties(values: list[float]) -> list[float]:
    """Ascending ranks, ties averaged (competition style)."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    sorted_vals = np.asarray(values)[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        avg = (i + j) / 2 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks.tolist()


RD_VARIANTS = ("rd_e_intra", "rd_e_inter", "rd_c_intra", "rd_c_inter")


def rank_table(final_rd: dict[str, dict[str, float]]) -> dict[str, float]:
    """Average rank over the four RD variants; lower RD ranks better."""
    if len(final_rd) < 2:
        raise ValueError("ranking needs at least 2 methods")
    methods = list(final_rd)
    for m in methods:
        miss = [v for v in RD_VARIANTS if v not in final_rd[m]]
        if miss:
            raise ValueError(f"method {m!r} missing RD variants {miss}")
    totals = {m: 0.0 for m in methods}
    for variant in RD_VARIANTS:
        ranks = _rank_with_ties([final_rd[m][variant] for m in methods])
        for m, r in zip(methods, ranks):
            totals[m] += r
    return {m: totals[m] / len(RD_VARIANTS) for m in methods}


def average_rank_over_tasks(per_task: dict[str, dict[str, float]]
                            ) -> dict[str, float]:
    """Mean of per-task average ranks for each method."""
    out = {}
    for method, task_ranks in per_task.items():
        vals = list(task_ranks.values())
        if not vals:
            raise ValueError(f"method {method!r} has no task ranks")
        out[method] = float(np.mean(vals))
    return out
