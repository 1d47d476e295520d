"""Vocabulary softmax, generation gate and extended-vocabulary copy mixing."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acvi import tensor as T
from acvi.pointer import (LOG_FLOOR, OutputParams, final_distribution, generation_prob, target_log_prob,
                          vocab_distribution)
from acvi.tensor import ParamStore, Tensor

D, E, H, V = 2, 3, 4, 5


def make_params(rng, zero=False):
    f = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.standard_normal(s))
    return OutputParams(Tensor(f(H, 3 * D)), Tensor(f(H)), Tensor(f(V, H)), Tensor(f(V)),
                        Tensor(f(2 * D)), Tensor(f(D)), Tensor(f(E)), Tensor(f(1)))


class TestVocabDistribution:
    def test_zero_params_uniform(self, rng):
        p = vocab_distribution(Tensor(rng.standard_normal((1, D))), Tensor(rng.standard_normal((1, 2 * D))),
                               make_params(rng, zero=True)).data
        np.testing.assert_allclose(p, 1.0 / V, atol=1e-7)

    def test_sums_to_one(self, rng):
        p = vocab_distribution(Tensor(rng.standard_normal((3, D))), Tensor(rng.standard_normal((3, 2 * D))),
                               make_params(rng)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_scalar_loop_oracle(self, rng, wide):
        params = make_params(rng)
        s, c = rng.standard_normal(D), rng.standard_normal(2 * D)
        got = vocab_distribution(Tensor(s[None]), Tensor(c[None]), params).data[0]
        sc = np.concatenate([s, c])
        Vm, b, Vo, bo = (t.data for t in (params.V, params.b, params.V_out, params.b_out))
        hidden = [np.tanh(sum(Vm[j, k] * sc[k] for k in range(3 * D)) + b[j]) for j in range(H)]
        logits = [sum(Vo[w, j] * hidden[j] for j in range(H)) + bo[w] for w in range(V)]
        expected = np.exp(logits) / np.sum(np.exp(logits))
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)

    def test_shape_error(self, rng):
        with pytest.raises(T.DimensionError):
            vocab_distribution(Tensor(np.zeros((1, D + 1))), Tensor(np.zeros((1, 2 * D))), make_params(rng))


class TestGenerationProb:
    def test_zero_params(self, rng):
        pg = generation_prob(Tensor(rng.standard_normal((1, 2 * D))), Tensor(rng.standard_normal((1, D))),
                             Tensor(rng.standard_normal((1, E))), make_params(rng, zero=True)).data
        assert pg[0] == 0.5

    def test_saturates(self, rng):
        p = make_params(rng, zero=True)
        p.b_ptr = Tensor([20.0])
        pg = generation_prob(Tensor(np.ones((1, 2 * D))), Tensor(np.ones((1, D))), Tensor(np.ones((1, E))), p)
        assert pg.data[0] > 0.999

    def test_scalar_oracle(self, rng, wide):
        p = make_params(rng)
        c, s, x = rng.standard_normal(2 * D), rng.standard_normal(D), rng.standard_normal(E)
        got = generation_prob(Tensor(c[None]), Tensor(s[None]), Tensor(x[None]), p).data[0]
        z = c @ p.w_c.data + s @ p.w_s.data + x @ p.w_x.data + p.b_ptr.data[0]
        assert abs(got - 1 / (1 + np.exp(-z))) < 1e-12


class TestFinalDistribution:
    def test_pure_generation(self, rng, wide):
        pv = Tensor(rng.dirichlet(np.ones(V))[None])
        out = final_distribution(pv, Tensor([1.0]), Tensor([[0.2, 0.8]]), np.array([[1, 6]]), n_oov=2).probs.data
        np.testing.assert_array_equal(out[0], np.concatenate([pv.data[0], [0.0, 0.0]]))

    def test_repeated_source_tokens_aggregate(self, rng, wide):
        A, B = 4, 5  # ids in a 6-word vocabulary
        pv = Tensor(rng.dirichlet(np.ones(6))[None])
        out = final_distribution(pv, Tensor([0.0]), Tensor([[0.2, 0.5, 0.3]]), np.array([[A, B, A]])).probs.data[0]
        assert out[A] == pytest.approx(0.5, abs=1e-15) and out[B] == pytest.approx(0.5, abs=1e-15)
        assert np.all(np.delete(out, [A, B]) == 0.0)

    def test_oov_slot_gets_copy_mass_only(self, wide):
        pv = Tensor(np.full((1, V), 1.0 / V))
        out = final_distribution(pv, Tensor([0.25]), Tensor([[0.6, 0.4]]), np.array([[V, 2]]), n_oov=1).probs.data
        assert out[0, V] == pytest.approx(0.75 * 0.6)
        assert out[0, 2] == pytest.approx(0.25 / V + 0.75 * 0.4)

    def test_masked_positions_contribute_nothing(self, wide):
        pv = Tensor(np.full((1, V), 1.0 / V))
        out = final_distribution(pv, Tensor([0.5]), Tensor([[1.0, 0.0]]), np.array([[2, 0]])).probs.data
        assert out[0, 0] == pytest.approx(0.5 / V)

    @given(st.floats(0, 1), st.integers(0, 2 ** 31))
    def test_valid_distribution_and_permutation_invariance(self, p_gen, seed):
        g = np.random.default_rng(seed)
        with T.wide():
            pv = Tensor(g.dirichlet(np.ones(V))[None])
            a = g.dirichlet(np.ones(6))
            ids = g.integers(0, V + 2, size=6)
            out = final_distribution(pv, Tensor([p_gen]), Tensor(a[None]), ids[None], n_oov=2).probs.data[0]
            perm = g.permutation(6)
            out2 = final_distribution(pv, Tensor([p_gen]), Tensor(a[perm][None]), ids[perm][None],
                                      n_oov=2).probs.data[0]
        assert np.all(out >= 0) and abs(out.sum() - 1) < 1e-6
        np.testing.assert_allclose(out, out2, atol=1e-15)

    def test_id_out_of_range(self):
        with pytest.raises(T.DimensionError):
            final_distribution(Tensor(np.full((1, V), 0.2)), Tensor([0.5]), Tensor([[1.0]]), np.array([[V]]))


class TestTargetLogProb:
    def test_floor(self):
        out = target_log_prob(Tensor([[0.0, 1.0]], dtype=np.float64), np.array([0])).data[0]
        assert out == pytest.approx(np.log(LOG_FLOOR))

    def test_value(self, wide):
        out = target_log_prob(Tensor([[0.25, 0.75], [0.5, 0.5]]), np.array([1, 0])).data
        np.testing.assert_allclose(out, np.log([0.75, 0.5]))

    def test_gradcheck_through_copy_mixing(self, rng, wide):
        store = ParamStore()
        for name, shape in (("lv", (1, V)), ("la", (1, 3)), ("g", (1,))):
            store.add(name, rng.standard_normal(shape))

        def fn():
            pv = T.softmax(store["lv"])
            a = T.softmax(store["la"])
            pg = T.sigmoid(store["g"])
            probs = final_distribution(pv, pg, a, np.array([[1, V, 1]]), n_oov=1).probs
            return T.sum(target_log_prob(probs, np.array([V])) + target_log_prob(probs, np.array([1])))

        report = T.grad_check(fn, store)
        assert report.passed, str(report)
