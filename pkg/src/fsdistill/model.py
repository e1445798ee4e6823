"""Toy pre-norm transformer encoder with a classification head.

The final encoder layer's output (padded positions zeroed) is the
penultimate representation distilled by every structure loss; the
classifier consumes a mean pool over unmasked positions.

Residual blocks follow the pre-norm arrangement:

    x = x + Attn(LN1(x));  x = x + FFN(LN2(x))

with multi-head scaled dot-product attention, additive key masking, and a
ReLU feed-forward. Dropout (inverted, applied to both residual branches)
only runs when a training-mode generator is supplied.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ATTENTION_MASK_BIAS = -1e9
LAYER_NORM_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    n_classes: int
    dropout_rate: float = 0.0
    pooling: str = "mean"  # "mean" | "first"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.pooling not in ("mean", "first"):
            raise ValueError("pooling must be 'mean' or 'first'")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_model": self.d_model, "d_ff": self.d_ff,
            "vocab_size": self.vocab_size, "max_seq_len": self.max_seq_len,
            "n_classes": self.n_classes, "dropout_rate": self.dropout_rate,
            "pooling": self.pooling,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class LayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor


@dataclass
class EncoderParams:
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerParams]
    w_cls: Tensor
    b_cls: Tensor

    def all_tensors(self) -> list[Tensor]:
        out = [self.tok_emb, self.pos_emb]
        for layer in self.layers:
            out.extend(getattr(layer, f.name) for f in
                       layer.__dataclass_fields__.values())
        out.extend([self.w_cls, self.b_cls])
        return out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            for f in layer.__dataclass_fields__.values():
                out.append((f"layers.{i}.{f.name}", getattr(layer, f.name)))
        out.extend([("w_cls", self.w_cls), ("b_cls", self.b_cls)])
        return out

    def set_requires_grad(self, flag: bool) -> "EncoderParams":
        for t in self.all_tensors():
            t.requires_grad = flag
        return self

    def copy(self, requires_grad: bool | None = None) -> "EncoderParams":
        def dup(t: Tensor) -> Tensor:
            rg = t.requires_grad if requires_grad is None else requires_grad
            return Tensor(t.data.copy(), requires_grad=rg)

        layers = [LayerParams(**{f.name: dup(getattr(l, f.name))
                                 for f in l.__dataclass_fields__.values()})
                  for l in self.layers]
        return EncoderParams(dup(self.tok_emb), dup(self.pos_emb), layers,
                             dup(self.w_cls), dup(self.b_cls))

    @classmethod
    def from_named(cls, named: dict, n_layers: int) -> "EncoderParams":
        def grab(name):
            return Tensor(named[name])

        layers = []
        for i in range(n_layers):
            kwargs = {f: grab(f"layers.{i}.{f}") for f in
                      LayerParams.__dataclass_fields__}
            layers.append(LayerParams(**kwargs))
        return cls(grab("tok_emb"), grab("pos_emb"), layers,
                   grab("w_cls"), grab("b_cls"))


@dataclass
class Batch:
    token_ids: np.ndarray  # [b, w] ints
    mask: np.ndarray       # [b, w] 1 = real token, 0 = padding
    labels: np.ndarray     # [b] ints

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids)
        self.mask = np.asarray(self.mask)
        self.labels = np.asarray(self.labels)
        if self.token_ids.shape != self.mask.shape:
            raise ShapeError("token_ids and mask shapes differ")
        if self.labels.shape != (self.token_ids.shape[0],):
            raise ShapeError("labels must have one entry per sample")
        if np.any(self.mask.sum(axis=1) < 1):
            raise ValueError("every sample needs at least one unmasked token")

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Normal(0, 0.02^2) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)

    def w(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    d, dff = config.d_model, config.d_ff
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            wq=w(d, d), bq=zeros(d), wk=w(d, d), bk=zeros(d),
            wv=w(d, d), bv=zeros(d), wo=w(d, d), bo=zeros(d),
            ln1_g=ones(d), ln1_b=zeros(d), ln2_g=ones(d), ln2_b=zeros(d),
            w_ff1=w(d, dff), b_ff1=zeros(dff),
            w_ff2=w(dff, d), b_ff2=zeros(d),
        ))
    return EncoderParams(
        tok_emb=w(config.vocab_size, d),
        pos_emb=w(config.max_seq_len, d),
        layers=layers,
        w_cls=w(d, config.n_classes),
        b_cls=zeros(config.n_classes),
    )


def init_student_from_teacher(teacher: EncoderParams,
                              student_config: EncoderConfig) -> EncoderParams:
    """Copy embeddings, the first student layers, and the classifier."""
    t_layers = len(teacher.layers)
    s_layers = student_config.n_layers
    if s_layers > t_layers:
        raise ValueError("student cannot have more layers than the teacher")
    d = teacher.tok_emb.shape[1]
    if (d != student_config.d_model
            or teacher.tok_emb.shape[0] != student_config.vocab_size
            or teacher.pos_emb.shape[0] != student_config.max_seq_len
            or teacher.w_cls.shape[1] != student_config.n_classes
            or teacher.layers[0].w_ff1.shape[1] != student_config.d_ff):
        raise ValueError("teacher/student dimensions incompatible")

    def dup(t: Tensor) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=True)

    layers = [LayerParams(**{f.name: dup(getattr(teacher.layers[i], f.name))
                             for f in LayerParams.__dataclass_fields__.values()})
              for i in range(s_layers)]
    return EncoderParams(dup(teacher.tok_emb), dup(teacher.pos_emb), layers,
                         dup(teacher.w_cls), dup(teacher.b_cls))


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return T.mul(x, Tensor(keep))


def forward(params: EncoderParams, config: EncoderConfig, batch: Batch,
            dropout_rng: np.random.Generator | None = None
            ) -> tuple[Tensor, Tensor]:
    """Run the encoder; returns (logits [b, classes], penultimate [b, w, d]).

    Padded positions are attention-masked and zeroed out of the returned
    representation; pooling ignores them. Passing dropout_rng enables
    training-mode dropout; analysis passes leave it None.
    """
    b, w = batch.token_ids.shape
    d, nh, dh = config.d_model, config.n_heads, config.d_head
    if w != config.max_seq_len:
        raise ShapeError(f"batch seq len {w} != configured {config.max_seq_len}")
    if batch.token_ids.max() >= config.vocab_size:
        raise ShapeError("token id outside vocabulary")

    mask = batch.mask.astype(np.float64)
    x = T.add(T.embedding(params.tok_emb, batch.token_ids),
              T.tile_leading(params.pos_emb, b))

    # one additive bias per key position, shared across heads and queries
    key_bias = np.broadcast_to(
        ((1.0 - mask) * ATTENTION_MASK_BIAS)[:, None, None, :],
        (b, nh, w, w)).copy()
    key_bias_t = Tensor(key_bias)

    for layer in params.layers:
        a = T.layer_norm(x, layer.ln1_g, layer.ln1_b, LAYER_NORM_EPS)
        flat = T.reshape(a, (b * w, d))

        def heads(m: Tensor) -> Tensor:
            # [b*w, d] -> [b, heads, w, d_head]
            return T.permute(T.reshape(m, (b, w, nh, dh)), (0, 2, 1, 3))

        q = heads(T.linear(flat, layer.wq, layer.bq))
        k = heads(T.linear(flat, layer.wk, layer.bk))
        v = heads(T.linear(flat, layer.wv, layer.bv))

        scores = T.scale(T.matmul_batched(q, T.permute(k, (0, 1, 3, 2))),
                         1.0 / np.sqrt(dh))
        weights = T.softmax_rows(T.add(scores, key_bias_t), 1.0)
        ctx = T.matmul_batched(weights, v)
        merged = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (b * w, d))
        attn_out = T.linear(merged, layer.wo, layer.bo)
        attn_out = _dropout(attn_out, config.dropout_rate, dropout_rng)
        x = T.add(x, T.reshape(attn_out, (b, w, d)))

        f = T.layer_norm(x, layer.ln2_g, layer.ln2_b, LAYER_NORM_EPS)
        ff = T.linear(T.reshape(f, (b * w, d)), layer.w_ff1, layer.b_ff1)
        ff = T.linear(T.relu(ff), layer.w_ff2, layer.b_ff2)
        ff = _dropout(ff, config.dropout_rate, dropout_rng)
        x = T.add(x, T.reshape(ff, (b, w, d)))

    # zero padded positions so they never enter the feature structure
    keep = np.broadcast_to(mask[:, :, None], (b, w, d)).copy()
    penultimate = T.apply_mask(x, keep)

    if config.pooling == "mean":
        pooled = T.mean_pool(penultimate, mask.sum(axis=1))
    else:
        pooled = T.take_indices(
            T.reshape(penultimate, (b * w, d)), np.arange(b) * w)
    logits = T.linear(pooled, params.w_cls, params.b_cls)
    return logits, penultimate


def flatten_features(penultimate: Tensor) -> Tensor:
    """[b, w, d] -> [b, w*d] view used by the batch-level losses."""
    b, w, d = penultimate.shape
    return T.reshape(penultimate, (b, w * d))
