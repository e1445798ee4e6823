import numpy as np
import pytest

from conftest import rel_err

import fsdistill.tensor as T
from fsdistill.losses import cross_entropy
from fsdistill.model import (
    Batch,
    EncoderConfig,
    EncoderParams,
    LayerParams,
    flatten_features,
    forward,
    init_params,
    init_student_from_teacher,
)
from fsdistill.tensor import Tensor, backward, finite_diff_grad

TINY = EncoderConfig(n_layers=1, n_heads=1, d_model=4, d_ff=6, vocab_size=8,
                     max_seq_len=3, n_classes=2)
SMALL = EncoderConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, vocab_size=12,
                      max_seq_len=5, n_classes=3)


def make_batch(rng, config, size=3):
    ids = rng.integers(1, config.vocab_size, (size, config.max_seq_len))
    mask = np.ones_like(ids)
    # give at least one sample a padded tail
    if config.max_seq_len >= 2:
        mask[0, -1] = 0
        ids[0, -1] = 0
    labels = rng.integers(0, config.n_classes, size)
    return Batch(ids, mask, labels)


def reference_forward(arrays, config, ids, mask):
    """Straight-line numpy re-implementation, loops instead of fused ops."""
    eps = 1e-5
    b, w = ids.shape
    d = config.d_model
    nh, dh = config.n_heads, config.d_model // config.n_heads

    def layer_norm(v, g, beta):
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        return (v - mu) / np.sqrt(var + eps) * g + beta

    def relu(v):
        return np.where(v > 0.0, v, 0.0)

    x = np.zeros((b, w, d))
    for i in range(b):
        for j in range(w):
            x[i, j] = arrays["tok_emb"][ids[i, j]] + arrays["pos_emb"][j]

    for li in range(config.n_layers):
        p = {k.split(".")[-1]: v for k, v in arrays.items()
             if k.startswith(f"layers.{li}.")}
        a = np.zeros_like(x)
        for i in range(b):
            for j in range(w):
                a[i, j] = layer_norm(x[i, j], p["ln1_g"], p["ln1_b"])
        attn = np.zeros_like(x)
        for i in range(b):
            q = a[i] @ p["wq"] + p["bq"]
            k = a[i] @ p["wk"] + p["bk"]
            v = a[i] @ p["wv"] + p["bv"]
            ctx = np.zeros((w, d))
            for h in range(nh):
                sl = slice(h * dh, (h + 1) * dh)
                scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
                scores = scores + (1.0 - mask[i])[None, :] * -1e9
                e = np.exp(scores - scores.max(axis=1, keepdims=True))
                weights = e / e.sum(axis=1, keepdims=True)
                ctx[:, sl] = weights @ v[:, sl]
            attn[i] = ctx @ p["wo"] + p["bo"]
        x = x + attn
        ff = np.zeros_like(x)
        for i in range(b):
            for j in range(w):
                f = layer_norm(x[i, j], p["ln2_g"], p["ln2_b"])
                ff[i, j] = relu(f @ p["w_ff1"] + p["b_ff1"]) @ p["w_ff2"] + p["b_ff2"]
        x = x + ff

    h_out = x * mask[:, :, None]
    pooled = h_out.sum(axis=1) / mask.sum(axis=1)[:, None]
    logits = pooled @ arrays["w_cls"] + arrays["b_cls"]
    return logits, h_out


class TestForward:
    def test_output_shapes(self):
        rng = np.random.default_rng(0)
        params = init_params(SMALL, seed=1)
        batch = make_batch(rng, SMALL, size=4)
        logits, penult = forward(params, SMALL, batch)
        assert logits.shape == (4, 3)
        assert penult.shape == (4, 5, 8)
        assert flatten_features(penult).shape == (4, 40)

    def test_masking_invariance_bit_exact(self):
        rng = np.random.default_rng(1)
        params = init_params(SMALL, seed=2)
        ids = rng.integers(1, SMALL.vocab_size, (3, 5))
        mask = np.ones_like(ids)
        mask[:, 3:] = 0
        labels = np.zeros(3, dtype=int)
        logits1, h1 = forward(params, SMALL, Batch(ids, mask, labels))
        ids2 = ids.copy()
        ids2[:, 3:] = rng.integers(1, SMALL.vocab_size, (3, 2))
        logits2, h2 = forward(params, SMALL, Batch(ids2, mask, labels))
        assert logits1.data.tobytes() == logits2.data.tobytes()
        assert h1.data.tobytes() == h2.data.tobytes()

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(2)
        params = init_params(TINY, seed=3)
        ids = rng.integers(1, TINY.vocab_size, (2, 3))
        mask = np.array([[1, 1, 1], [1, 1, 0]])
        batch = Batch(ids, mask, np.array([0, 1]))
        logits, penult = forward(params, TINY, batch)
        arrays = {name: t.data for name, t in params.named_tensors()}
        ref_logits, ref_h = reference_forward(arrays, TINY, ids, mask)
        np.testing.assert_allclose(logits.data, ref_logits, atol=1e-10)
        np.testing.assert_allclose(penult.data, ref_h, atol=1e-10)

    def test_reference_agreement_multilayer_multihead(self):
        rng = np.random.default_rng(3)
        params = init_params(SMALL, seed=4)
        batch = make_batch(rng, SMALL, size=3)
        logits, penult = forward(params, SMALL, batch)
        arrays = {name: t.data for name, t in params.named_tensors()}
        ref_logits, ref_h = reference_forward(
            arrays, SMALL, batch.token_ids, batch.mask.astype(float))
        np.testing.assert_allclose(logits.data, ref_logits, atol=1e-10)
        np.testing.assert_allclose(penult.data, ref_h, atol=1e-10)

    def test_deterministic_without_dropout(self):
        rng = np.random.default_rng(4)
        params = init_params(SMALL, seed=5)
        batch = make_batch(rng, SMALL)
        l1, h1 = forward(params, SMALL, batch)
        l2, h2 = forward(params, SMALL, batch)
        assert l1.data.tobytes() == l2.data.tobytes()
        assert h1.data.tobytes() == h2.data.tobytes()

    def test_dropout_changes_output_and_is_seeded(self):
        cfg = EncoderConfig(**{**SMALL.to_dict(), "dropout_rate": 0.5})
        params = init_params(cfg, seed=6)
        batch = make_batch(np.random.default_rng(5), cfg)
        eval_logits, _ = forward(params, cfg, batch)
        train1, _ = forward(params, cfg, batch,
                            dropout_rng=np.random.default_rng(7))
        train2, _ = forward(params, cfg, batch,
                            dropout_rng=np.random.default_rng(7))
        train3, _ = forward(params, cfg, batch,
                            dropout_rng=np.random.default_rng(8))
        assert train1.data.tobytes() == train2.data.tobytes()
        assert train1.data.tobytes() != eval_logits.data.tobytes()
        assert train1.data.tobytes() != train3.data.tobytes()

    def test_first_token_pooling(self):
        cfg = EncoderConfig(**{**SMALL.to_dict(), "pooling": "first"})
        params = init_params(cfg, seed=7)
        batch = make_batch(np.random.default_rng(6), cfg)
        logits, penult = forward(params, cfg, batch)
        manual = penult.data[:, 0, :] @ params.w_cls.data + params.b_cls.data
        np.testing.assert_allclose(logits.data, manual, atol=1e-12)

    def test_bad_batch_rejected(self):
        params = init_params(TINY, seed=8)
        ids = np.array([[9, 0, 0]])  # out of vocab
        with pytest.raises(Exception):
            forward(params, TINY, Batch(ids, np.ones_like(ids), np.array([0])))
        with pytest.raises(ValueError):
            Batch(np.array([[1, 1]]), np.array([[0, 0]]), np.array([0]))


class TestInit:
    def test_same_seed_identical(self):
        p1 = init_params(SMALL, seed=11)
        p2 = init_params(SMALL, seed=11)
        for (n1, t1), (_, t2) in zip(p1.named_tensors(), p2.named_tensors()):
            assert t1.data.tobytes() == t2.data.tobytes(), n1

    def test_layer_norm_gains_unit_biases_zero(self):
        p = init_params(SMALL, seed=12)
        for layer in p.layers:
            np.testing.assert_array_equal(layer.ln1_g.data, np.ones(8))
            np.testing.assert_array_equal(layer.ln2_g.data, np.ones(8))
            np.testing.assert_array_equal(layer.bq.data, np.zeros(8))
        np.testing.assert_array_equal(p.b_cls.data, np.zeros(3))

    def test_weight_std_near_target(self):
        cfg = EncoderConfig(n_layers=1, n_heads=2, d_model=100, d_ff=100,
                            vocab_size=100, max_seq_len=4, n_classes=2)
        p = init_params(cfg, seed=13)
        std = p.tok_emb.data.std()
        assert abs(std - 0.02) < 0.2 * 0.02

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(1, 3, 8, 16, 10, 4, 2)  # 8 % 3 != 0
        with pytest.raises(ValueError):
            EncoderConfig(1, 2, 8, 16, 10, 0, 2)
        with pytest.raises(ValueError):
            EncoderConfig(1, 2, 8, 16, 10, 4, 1)


class TestStudentInit:
    def test_same_depth_exact_copy(self):
        teacher = init_params(SMALL, seed=20)
        student = init_student_from_teacher(teacher, SMALL)
        for (n1, t1), (_, t2) in zip(teacher.named_tensors(),
                                     student.named_tensors()):
            assert t1.data.tobytes() == t2.data.tobytes(), n1
            assert t1 is not t2
        batch = make_batch(np.random.default_rng(9), SMALL)
        l_t, _ = forward(teacher, SMALL, batch)
        l_s, _ = forward(student, SMALL, batch)
        assert l_t.data.tobytes() == l_s.data.tobytes()

    def test_truncation_takes_leading_layers(self):
        teacher_cfg = EncoderConfig(n_layers=4, n_heads=2, d_model=8, d_ff=16,
                                    vocab_size=12, max_seq_len=5, n_classes=3)
        student_cfg = EncoderConfig(**{**teacher_cfg.to_dict(), "n_layers": 2})
        teacher = init_params(teacher_cfg, seed=21)
        student = init_student_from_teacher(teacher, student_cfg)
        assert len(student.layers) == 2
        for i in range(2):
            assert (student.layers[i].wq.data.tobytes()
                    == teacher.layers[i].wq.data.tobytes())

    def test_matches_hand_assembled_truncated_model(self):
        teacher_cfg = EncoderConfig(n_layers=3, n_heads=2, d_model=8, d_ff=16,
                                    vocab_size=12, max_seq_len=5, n_classes=2)
        student_cfg = EncoderConfig(**{**teacher_cfg.to_dict(), "n_layers": 2})
        teacher = init_params(teacher_cfg, seed=22)
        student = init_student_from_teacher(teacher, student_cfg)
        # independently assemble the truncated model from raw teacher arrays
        manual = EncoderParams(
            tok_emb=Tensor(teacher.tok_emb.data.copy()),
            pos_emb=Tensor(teacher.pos_emb.data.copy()),
            layers=[LayerParams(**{f: Tensor(getattr(teacher.layers[i], f).data.copy())
                                   for f in LayerParams.__dataclass_fields__})
                    for i in range(2)],
            w_cls=Tensor(teacher.w_cls.data.copy()),
            b_cls=Tensor(teacher.b_cls.data.copy()),
        )
        batch = make_batch(np.random.default_rng(10), student_cfg)
        l1, h1 = forward(student, student_cfg, batch)
        l2, h2 = forward(manual, student_cfg, batch)
        assert l1.data.tobytes() == l2.data.tobytes()
        assert h1.data.tobytes() == h2.data.tobytes()

    def test_rejects_deeper_student(self):
        teacher = init_params(TINY, seed=23)
        deeper = EncoderConfig(**{**TINY.to_dict(), "n_layers": 2})
        with pytest.raises(ValueError):
            init_student_from_teacher(teacher, deeper)

    def test_rejects_dimension_mismatch(self):
        teacher = init_params(TINY, seed=24)
        wrong = EncoderConfig(n_layers=1, n_heads=1, d_model=8, d_ff=6,
                              vocab_size=8, max_seq_len=3, n_classes=2)
        with pytest.raises(ValueError):
            init_student_from_teacher(teacher, wrong)


class TestGradients:
    def test_cross_entropy_gradients_match_fd_per_group(self):
        rng = np.random.default_rng(30)
        params = init_params(TINY, seed=31)
        batch = make_batch(rng, TINY, size=2)

        def loss_with(name, arr):
            trial = params.copy(requires_grad=False)
            lookup = dict(trial.named_tensors())
            lookup[name].data = arr.data
            logits, _ = forward(trial, TINY, batch)
            return cross_entropy(logits, batch.labels)

        logits, _ = forward(params, TINY, batch)
        backward(cross_entropy(logits, batch.labels))
        for name, tensor in params.named_tensors():
            assert tensor.grad is not None, f"{name} missing grad"
            fd = finite_diff_grad(lambda v: loss_with(name, v),
                                  Tensor(tensor.data.copy()))
            assert rel_err(tensor.grad, fd) < 1e-3, name
