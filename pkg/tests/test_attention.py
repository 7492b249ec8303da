import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cqdet.attention import (AttentionParams, adaptive_self_attention, asa_forward,
                             asa_kernel_grad, compute_epsilons, modulation_factor,
                             modulation_kernel, modulated_softmax, pairwise_distance)
from cqdet.errors import ConfigurationError, ShapeError
from cqdet.nn import Affine
from cqdet.oracles import naive_distance, vanilla_mhsa
from cqdet.queries import QuerySet

KINDS = ("gaussian", "laplacian", "reciprocal")


def _oracle(x, p):
    return vanilla_mhsa(x, p.wq.weight, p.wq.bias, p.wk.weight, p.wk.bias,
                        p.wv.weight, p.wv.bias, p.wo.weight, p.wo.bias, p.heads)


class TestDistance:
    def test_identical(self):
        np.testing.assert_array_equal(pairwise_distance(np.ones((2, 9))), np.zeros((2, 2)))

    def test_345(self):
        D = pairwise_distance(np.array([[0, 0, 0], [3, 4, 0]], dtype=float))
        assert D[0, 1] == 5.0 and D[1, 0] == 5.0

    def test_oracle(self, rng):
        s = rng.normal(0, 30, size=(50, 9))
        np.testing.assert_allclose(pairwise_distance(s), naive_distance(s), rtol=0, atol=1e-12)


class TestEpsilon:
    def test_zero_weights(self):
        p = AttentionParams.zeros(64, 8)
        eps = compute_epsilons(np.random.default_rng(0).normal(size=(5, 64)), p)
        assert eps.shape == (5, 8)
        np.testing.assert_allclose(eps, math.log(2) + 1e-3, rtol=1e-15)
        assert eps[0, 0] == pytest.approx(0.6941, abs=1e-4)

    def test_identical_rows(self, rng):
        p = AttentionParams.random(64, 8, seed=2)
        x = rng.normal(size=(1, 64)).repeat(3, axis=0)
        eps = compute_epsilons(x, p)
        np.testing.assert_array_equal(eps[0], eps[2])

    def test_positive(self, rng):
        p = AttentionParams.random(32, 4, seed=3)
        assert np.all(compute_epsilons(rng.normal(0, 50, size=(40, 32)), p) >= 1e-3)

    def test_single_layer(self, rng):
        p = AttentionParams.random(32, 4, seed=3, eps_layers=1)
        assert len(p.eps_net) == 1
        assert compute_epsilons(rng.normal(size=(3, 32)), p).shape == (3, 4)


class TestKernels:
    @pytest.mark.parametrize("kind", KINDS + ("none",))
    def test_one_at_zero(self, kind):
        assert modulation_kernel(0.0, 0.7, kind) == 1.0

    def test_gaussian_at_eps(self):
        assert modulation_kernel(1.3, 1.3, "gaussian") == pytest.approx(math.exp(-0.5), rel=1e-15)
        assert modulation_kernel(1.0, 1.0, "gaussian") == pytest.approx(0.60653, abs=1e-5)

    def test_closed_forms(self):
        assert modulation_kernel(2.0, 1.0, "laplacian") == pytest.approx(math.exp(-2.0))
        assert modulation_kernel(2.0, 1.0, "reciprocal") == pytest.approx(1.0 / 3.0)

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            modulation_kernel(1.0, 1.0, "cosine")

    def test_row_epsilon(self):
        D = np.array([[0.0, 2.0], [2.0, 0.0]])
        eps = np.array([[1.0], [2.0]])
        f = modulation_factor(D, eps, "laplacian", 0)
        np.testing.assert_allclose(f, [[1.0, math.exp(-2.0)], [math.exp(-1.0), 1.0]])

    def test_grad_values(self):
        dD, _ = asa_kernel_grad(0.0, 1.0, "gaussian")
        assert dD == 0.0
        _, de = asa_kernel_grad(1.0, 1.0, "gaussian")
        assert de == pytest.approx(math.exp(-0.5), rel=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e3), st.floats(1e-3, 1e3), st.sampled_from(KINDS))
def test_kernel_range(D, eps, kind):
    f = modulation_kernel(D, eps, kind)
    assert 0.0 <= f <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(0.01, 20), st.sampled_from(KINDS))
def test_kernel_monotone(d1, d2, eps, kind):
    lo, hi = sorted((d1, d2))
    assert modulation_kernel(lo, eps, kind) >= modulation_kernel(hi, eps, kind)


class TestASA:
    def test_none_matches_oracle(self, rng):
        p = AttentionParams.random(64, 8, seed=1, modulation="none")
        x = rng.normal(size=(32, 64))
        c = rng.uniform(-30, 30, size=(32, 3))
        np.testing.assert_allclose(asa_forward(x, c, p), _oracle(x, p), rtol=0, atol=1e-10)

    def test_huge_eps_degenerates(self, rng):
        p = AttentionParams.random(64, 8, seed=1)
        big = (Affine(np.zeros((64, 8)), np.full(8, 1e9)),)
        p = AttentionParams(p.d, p.heads, p.wq, p.wk, p.wv, p.wo, big, "gaussian")
        x = rng.normal(size=(32, 64))
        c = rng.uniform(-50, 50, size=(32, 3))
        np.testing.assert_allclose(asa_forward(x, c, p), _oracle(x, p), rtol=0, atol=1e-6)

    def test_single_query(self, rng):
        p = AttentionParams.random(32, 4, seed=5)
        x = rng.normal(size=(1, 32))
        np.testing.assert_allclose(asa_forward(x, np.zeros((1, 3)), p), p.wo(p.wv(x)), atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        p = AttentionParams.random(32, 4, seed=6, modulation="reciprocal")
        _, w = asa_forward(rng.normal(size=(10, 32)), rng.normal(size=(10, 3)), p, return_weights=True)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)

    def test_log_space_variant(self, rng):
        p = AttentionParams.random(32, 4, seed=6, log_space=True)
        x = rng.normal(size=(6, 32))
        c = rng.normal(size=(6, 3))
        _, w = asa_forward(x, c, p, return_weights=True)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)

    def test_modulated_softmax_forms(self):
        logits = np.array([[1.0, 2.0]])
        factor = np.array([[1.0, 0.5]])
        np.testing.assert_allclose(modulated_softmax(logits, factor), [[0.5, 0.5]])
        ls = modulated_softmax(logits, factor, log_space=True)
        e = np.exp([1.0, 2.0 + math.log(0.5)])
        np.testing.assert_allclose(ls[0], e / e.sum())

    def test_permutation_equivariant(self, rng):
        p = AttentionParams.random(32, 4, seed=7)
        x = rng.normal(size=(9, 32))
        c = rng.normal(0, 5, size=(9, 3))
        perm = rng.permutation(9)
        np.testing.assert_allclose(asa_forward(x[perm], c[perm], p), asa_forward(x, c, p)[perm],
                                   atol=1e-12)

    def test_queryset_wrapper(self, rng):
        p = AttentionParams.random(32, 4, seed=8)
        states = rng.normal(size=(4, 9))
        states[:, 3:6] = 1
        qs = QuerySet(states, rng.normal(size=(4, 32)), ("global",) * 4, np.ones(4))
        np.testing.assert_array_equal(adaptive_self_attention(qs, p),
                                      asa_forward(qs.embeddings, qs.centers, p))

    def test_bad_width(self, rng):
        with pytest.raises(ShapeError):
            asa_forward(rng.normal(size=(3, 16)), np.zeros((3, 3)), AttentionParams.zeros(32, 4))

    def test_heads_must_divide(self):
        with pytest.raises(ConfigurationError):
            AttentionParams.random(30, 4)
