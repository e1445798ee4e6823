"""Teacher fine-tuning and the two-stage student distillation loop.

Loss assembly per step, by selected kind:

    nods -> CE
    vkd  -> alpha * CE + (1 - alpha) * KLD/B
    i/l/g -> vkd + beta * (single structure loss)
    il/ilg -> vkd + beta * (gamma_i * L_i + gamma_l * L_l + gamma_g * L_g)

The KL term is defined batch-summed; the trainer divides it by the batch
size so alpha and beta keep the same meaning across batch sizes. One joint
backward pass covers the whole objective; Adam updates the student
parameters and, for the memory kinds, the student memory rows.

Random streams: shuffling, student-memory init, and dropout each draw from
their own substream of the run seed, so e.g. ablations with different
epochs share initialisation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import losses as L
from . import rng as R
from . import tensor as T
from .losses import LossKind, LossWeights
from .memory import MemoryBank, init_student_memory
from .model import Batch, EncoderConfig, EncoderParams, flatten_features, forward
from .tensor import Tensor, backward, zero_grad


class TrainingDiverged(ArithmeticError):
    """Loss or activations became non-finite during training."""


class MissingMemoryError(ValueError):
    """A memory-based kind was requested without a teacher memory."""


@dataclass
class OptimizerSettings:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class TrainSettings:
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    epochs: int = 5
    batch_size: int = 32


@dataclass
class DistillConfig:
    kind: LossKind = LossKind.VKD
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    memory_size: int = 8
    kmeans_epochs: int = 3
    memory_seed: int = 0
    snapshot_every: int = 0  # 0 disables parameter snapshots

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (grams need N >= 2)")
        self.weights.validate(self.kind)


@dataclass
class AdamState:
    params: list[Tensor]
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState, grads: list[np.ndarray],
              settings: OptimizerSettings) -> AdamState:
    """One bias-corrected Adam update, applied in place to state.params."""
    if len(grads) != len(state.params):
        raise ValueError("gradient list does not match parameter list")
    state.t += 1
    b1, b2 = settings.beta1, settings.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(state.params, grads)):
        if g.shape != p.data.shape:
            raise ValueError("gradient shape does not match parameter shape")
        if settings.weight_decay:
            g = g + settings.weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + settings.eps)
        p.data = p.data - settings.lr * update
    return state


def _epoch_batches(dataset, batch_size: int, seed: int, epoch: int):
    order = R.substream(seed, "shuffle", epoch).permutation(dataset.size)
    return dataset.batches(batch_size, order=order, drop_small=True)


def evaluate(config: EncoderConfig, params: EncoderParams, dataset,
             batch_size: int = 64) -> tuple[np.ndarray, float]:
    """Deterministic eval-mode predictions and accuracy."""
    preds = []
    for batch in dataset.batches(batch_size):
        logits, _ = forward(params, config, batch)
        preds.append(np.argmax(logits.data, axis=1))
    preds = np.concatenate(preds)
    return preds, float(np.mean(preds == dataset.labels))


def fine_tune_teacher(config: EncoderConfig, dataset,
                      settings: TrainSettings, seed: int,
                      init: EncoderParams | None = None
                      ) -> tuple[EncoderParams, list[dict]]:
    """Cross-entropy training of the teacher; returns params and step log."""
    from .model import init_params

    params = init.copy(requires_grad=True) if init is not None \
        else init_params(config, R.substream(seed, "init").integers(2 ** 31))
    state = AdamState(params.all_tensors())
    history: list[dict] = []
    step = 0
    for epoch in range(settings.epochs):
        drop_rng = (R.substream(seed, "dropout", epoch)
                    if config.dropout_rate > 0 else None)
        for batch in _epoch_batches(dataset, settings.batch_size, seed, epoch):
            try:
                logits, _ = forward(params, config, batch, dropout_rng=drop_rng)
                loss = L.cross_entropy(logits, batch.labels)
                backward(loss)
            except T.NumericalError as e:
                raise TrainingDiverged(
                    f"teacher training diverged at step {step}: {e}") from e
            grads = [p.grad for p in state.params]
            adam_step(state, grads, settings.optimizer)
            zero_grad(state.params)
            batch_acc = float(np.mean(
                np.argmax(logits.data, axis=1) == batch.labels))
            history.append({"step": step, "epoch": epoch,
                            "loss_ce": loss.item(), "batch_acc": batch_acc})
            step += 1
    _, train_acc = evaluate(config, params, dataset)
    history.append({"step": step, "epoch": settings.epochs,
                    "train_accuracy": train_acc})
    return params, history


@dataclass
class DistillResult:
    params: EncoderParams
    student_memory: MemoryBank | None
    metrics: list[dict]
    snapshots: list[tuple[int, EncoderParams, MemoryBank | None]]


def _structure_terms(kind: LossKind, weights: LossWeights,
                     t_h, s_h, t_flat, s_flat, t_mem, s_mem) -> tuple[Tensor, dict]:
    parts: dict[str, float] = {}
    li = ll = lg = None
    if kind in (LossKind.INTRA, LossKind.INTRA_LOCAL,
                LossKind.INTRA_LOCAL_GLOBAL):
        li = L.fsd_intra(t_h, s_h)
        parts["loss_intra"] = li.item()
    if kind in (LossKind.LOCAL, LossKind.INTRA_LOCAL,
                LossKind.INTRA_LOCAL_GLOBAL):
        ll = L.fsd_local(t_flat, s_flat)
        parts["loss_local"] = ll.item()
    if kind in (LossKind.GLOBAL, LossKind.INTRA_LOCAL_GLOBAL):
        f_e = L.memory_hidden_loss(t_flat, s_flat, t_mem.centroids,
                                   s_mem.centroids, "euclidean")
        f_c = L.memory_hidden_loss(t_flat, s_flat, t_mem.centroids,
                                   s_mem.centroids, "cosine")
        f_mm = L.memory_structure_loss(t_mem.centroids, s_mem.centroids)
        lg = T.add(T.add(T.scale(f_e, weights.gamma_m),
                         T.scale(f_c, 1.0 - weights.gamma_m)), f_mm)
        parts.update({"loss_mh_euclidean": f_e.item(),
                      "loss_mh_cosine": f_c.item(),
                      "loss_mm": f_mm.item(),
                      "loss_global": lg.item()})

    if kind in (LossKind.INTRA, LossKind.LOCAL, LossKind.GLOBAL):
        structure = {LossKind.INTRA: li, LossKind.LOCAL: ll,
                     LossKind.GLOBAL: lg}[kind]
    else:
        zero = Tensor(0.0)
        structure = L.fsd_integrated(
            li if li is not None else zero,
            ll if ll is not None else zero,
            lg if lg is not None else zero,
            weights.gamma_i, weights.gamma_l,
            weights.gamma_g if kind is LossKind.INTRA_LOCAL_GLOBAL else 0.0)
    parts["loss_structure"] = structure.item()
    return structure, parts


def distill(teacher_config: EncoderConfig, teacher_params: EncoderParams,
            student_config: EncoderConfig, student_init: EncoderParams,
            teacher_memory: MemoryBank | None, config: DistillConfig,
            dataset) -> DistillResult:
    """Train a student against a frozen teacher with the selected objective."""
    kind, weights = config.kind, config.weights
    if kind.uses_memory and teacher_memory is None:
        raise MissingMemoryError(
            f"kind {kind.value!r} needs a post-trained teacher memory")

    teacher_params.set_requires_grad(False)
    params = student_init.copy(requires_grad=True)
    student_memory = None
    trainables = params.all_tensors()
    if kind.uses_memory:
        mem_seed = R.substream(config.seed, "memory").integers(2 ** 31)
        student_memory = init_student_memory(
            teacher_memory.size, teacher_memory.width, seed=mem_seed)
        trainables = trainables + [student_memory.centroids]

    state = AdamState(trainables)
    metrics: list[dict] = []
    snapshots: list[tuple[int, EncoderParams, MemoryBank | None]] = []

    def snapshot(step):
        mem_copy = None
        if student_memory is not None:
            mem_copy = MemoryBank(Tensor(student_memory.centroids.data.copy()),
                                  trainable=False, source="student")
        snapshots.append((step, params.copy(requires_grad=False), mem_copy))

    step = 0
    if config.snapshot_every > 0:
        snapshot(0)
    for epoch in range(config.epochs):
        drop_rng = (R.substream(config.seed, "dropout", epoch)
                    if student_config.dropout_rate > 0 else None)
        for batch in _epoch_batches(dataset, config.batch_size,
                                    config.seed, epoch):
            try:
                t_logits, t_h = forward(teacher_params, teacher_config, batch)
                s_logits, s_h = forward(params, student_config, batch,
                                        dropout_rng=drop_rng)
                ce = L.cross_entropy(s_logits, batch.labels)
                row = {"step": step, "epoch": epoch, "loss_ce": ce.item()}

                if kind is LossKind.NODS:
                    total = ce
                else:
                    kld = T.scale(L.kld_loss(t_logits, s_logits, weights.tau,
                                             weights.scale_kld_by_tau_sq),
                                  1.0 / batch.size)
                    vkd = L.vkd_loss(ce, kld, weights.alpha)
                    row.update({"loss_kld": kld.item(),
                                "loss_vkd": vkd.item()})
                    if kind is LossKind.VKD:
                        total = vkd
                    else:
                        structure, parts = _structure_terms(
                            kind, weights, t_h, s_h,
                            flatten_features(t_h), flatten_features(s_h),
                            teacher_memory, student_memory)
                        row.update(parts)
                        total = L.total_loss(vkd, structure, weights.beta)
                backward(total)
            except T.NumericalError as e:
                raise TrainingDiverged(
                    f"distillation diverged at step {step}: {e}") from e
            adam_step(state, [p.grad for p in state.params], config.optimizer)
            zero_grad(state.params)
            row["loss_total"] = total.item()
            metrics.append(row)
            step += 1
            if config.snapshot_every > 0 and step % config.snapshot_every == 0:
                snapshot(step)
    if config.snapshot_every > 0 and (not snapshots or snapshots[-1][0] != step):
        snapshot(step)
    return DistillResult(params, student_memory, metrics, snapshots)
