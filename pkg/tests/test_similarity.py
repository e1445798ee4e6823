import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cka_oracle, hsic_oracle, random_orthogonal, rel_err

import fsdistill.tensor as T
from fsdistill.similarity import (
    DegenerateFeatures,
    cka,
    cka_per_sample,
    gram,
    hsic,
)
from fsdistill.tensor import ShapeError, Tensor, backward, finite_diff_grad


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestGram:
    def test_identity(self):
        np.testing.assert_array_equal(gram(t(np.eye(2))).data, np.eye(2))

    def test_hand_product(self):
        out = gram(t([[1.0, 1.0], [2.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[2.0, 4.0], [4.0, 8.0]])

    def test_symmetric_psd(self):
        rng = np.random.default_rng(5)
        k = gram(t(rng.uniform(-1, 1, (5, 3)))).data
        np.testing.assert_allclose(k, k.T, atol=1e-14)
        assert np.min(np.linalg.eigvalsh(k)) >= -1e-10

    def test_too_few_examples(self):
        with pytest.raises(ShapeError):
            gram(t([[1.0, 2.0]]))


class TestHsic:
    def test_all_ones_gram_annihilated(self):
        rng = np.random.default_rng(1)
        k = rng.uniform(0, 1, (4, 4))
        assert abs(hsic(t(k), t(np.ones((4, 4)))).item()) < 1e-14

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        k = rng.uniform(-1, 1, (5, 5))
        l = rng.uniform(-1, 1, (5, 5))
        assert abs(hsic(t(k), t(l)).item() - hsic(t(l), t(k)).item()) < 1e-12

    def test_double_sum_oracle(self):
        e1 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        k = e1 @ e1.T
        got = hsic(t(k), t(k)).item()
        assert abs(got - hsic_oracle(k, k)) < 1e-12

    def test_double_sum_oracle_random_sizes(self):
        for n in range(2, 9):
            rng = np.random.default_rng(n)
            k = gram(t(rng.uniform(-1, 1, (n, 3)))).data
            l = gram(t(rng.uniform(-1, 1, (n, 4)))).data
            assert abs(hsic(t(k), t(l)).item() - hsic_oracle(k, l)) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            hsic(t(np.eye(3)), t(np.eye(4)))


class TestCka:
    def test_self_similarity_is_one(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = rng.uniform(-1, 1, (6, 4))
            assert abs(cka(t(x), t(x)).item() - 1.0) < 1e-10

    def test_orthogonal_and_scaling_invariance(self):
        rng = np.random.default_rng(123)
        for _ in range(50):
            x = rng.uniform(-1, 1, (6, 4))
            q = random_orthogonal(rng, 4)
            c = rng.uniform(0.1, 5.0) * rng.choice([-1.0, 1.0])
            assert abs(cka(t(x @ q), t(x)).item() - 1.0) < 1e-8
            assert abs(cka(t(c * x), t(x)).item() - 1.0) < 1e-8

    def test_isotropic_scaling_fixture(self):
        e1 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        e2 = 2.0 * e1
        assert abs(cka(t(e1), t(e2)).item() - 1.0) < 1e-12

    def test_perturbed_matches_double_sum_oracle(self):
        e1 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        rng = np.random.default_rng(17)
        e2 = 2.0 * e1 + 0.3 * rng.uniform(-1, 1, e1.shape)
        assert abs(cka(t(e1), t(e2)).item() - cka_oracle(e1, e2)) < 1e-12

    def test_symmetry_in_arguments(self):
        rng = np.random.default_rng(8)
        a = rng.uniform(-1, 1, (5, 3))
        b = rng.uniform(-1, 1, (5, 7))
        assert abs(cka(t(a), t(b)).item() - cka(t(b), t(a)).item()) < 1e-12

    def test_range(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            a = rng.uniform(-1, 1, (5, 3))
            b = rng.uniform(-1, 1, (5, 3))
            v = cka(t(a), t(b)).item()
            assert -1e-10 <= v <= 1.0 + 1e-10

    def test_degenerate_raises(self):
        const = np.ones((4, 3))
        rng = np.random.default_rng(2)
        with pytest.raises(DegenerateFeatures):
            cka(t(const), t(rng.uniform(-1, 1, (4, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        av = rng.uniform(-1, 1, (4, 3))
        bv = rng.uniform(-1, 1, (4, 3))
        for which in range(2):
            def f(v, which=which):
                a = v if which == 0 else t(av)
                b = t(bv) if which == 0 else v
                return cka(a, b)

            leaf = t(av if which == 0 else bv, grad=True)
            a = leaf if which == 0 else t(av)
            b = t(bv) if which == 0 else leaf
            backward(cka(a, b))
            fd = finite_diff_grad(f, t(av if which == 0 else bv))
            assert rel_err(leaf.grad, fd) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 7), st.integers(2, 5))
def test_cka_symmetric_and_bounded_property(seed, n, f):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (n, f))
    b = rng.uniform(-1, 1, (n, f))
    v1 = cka(t(a), t(b)).item()
    v2 = cka(t(b), t(a)).item()
    assert abs(v1 - v2) < 1e-12
    assert -1e-10 <= v1 <= 1.0 + 1e-10


class TestCkaPerSample:
    def test_identical_inputs_give_ones(self):
        rng = np.random.default_rng(4)
        h = rng.uniform(-1, 1, (3, 4, 2))
        res = cka_per_sample(t(h), t(h))
        assert res.n_valid == 3
        np.testing.assert_allclose(res.values.data, np.ones(3), atol=1e-10)

    def test_single_sample_matches_plain_cka(self):
        rng = np.random.default_rng(6)
        ht = rng.uniform(-1, 1, (1, 4, 3))
        hs = rng.uniform(-1, 1, (1, 4, 3))
        res = cka_per_sample(t(ht), t(hs))
        direct = cka(t(ht[0]), t(hs[0])).item()
        assert abs(res.values.data[0] - direct) < 1e-12

    def test_entries_match_independent_calls(self):
        rng = np.random.default_rng(9)
        ht = rng.uniform(-1, 1, (2, 4, 3))
        hs = rng.uniform(-1, 1, (2, 4, 3))
        res = cka_per_sample(t(ht), t(hs))
        for i in range(2):
            direct = cka(t(ht[i]), t(hs[i])).item()
            assert abs(res.values.data[i] - direct) < 1e-12
            assert abs(res.values.data[i] - cka_oracle(ht[i], hs[i])) < 1e-12

    def test_degenerate_sample_flagged(self):
        rng = np.random.default_rng(10)
        ht = rng.uniform(-1, 1, (3, 4, 2))
        hs = rng.uniform(-1, 1, (3, 4, 2))
        ht[1] = 0.0  # e.g. an all-padding sample
        hs_t, ht_t = t(hs), t(ht)
        res = cka_per_sample(ht_t, hs_t)
        assert list(res.degenerate) == [1]
        assert list(res.indices) == [0, 2]
        for row, i in enumerate([0, 2]):
            direct = cka(t(ht[i]), t(hs[i])).item()
            assert abs(res.values.data[row] - direct) < 1e-12

    def test_gradient_through_batch(self):
        rng = np.random.default_rng(12)
        ht = rng.uniform(-1, 1, (2, 4, 3))
        hs = rng.uniform(-1, 1, (2, 4, 3))

        def f(v):
            res = cka_per_sample(t(ht), v)
            return T.tsum(res.values)

        leaf = t(hs, grad=True)
        backward(T.tsum(cka_per_sample(t(ht), leaf).values))
        fd = finite_diff_grad(f, t(hs))
        assert rel_err(leaf.grad, fd) < 1e-4
