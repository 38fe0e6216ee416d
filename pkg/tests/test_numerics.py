import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from mpmath import exp as mexp
from mpmath import mp, mpf

from threatfuse import numerics as nx
from threatfuse.numerics import NumericError, ParamStore, Tensor, grad_check, matmul2, softmax_rows


def mp_softmax_row(row):
    mp.dps = 50
    vals = [mpf(float(v)) for v in row]
    es = [mexp(v) for v in vals]
    z = sum(es)
    return [float(e / z) for e in es]


class TestSoftmaxRows:
    def test_equal_values_uniform(self):
        assert np.allclose(softmax_rows([[3.0, 3.0, 3.0, 3.0]]), 0.25, atol=1e-15)

    def test_closed_form(self):
        out = softmax_rows([[0.0, np.log(3.0)]])
        assert out[0] == pytest.approx([0.25, 0.75], abs=1e-15)

    def test_high_precision_oracle(self):
        x = np.random.default_rng(0).normal(scale=3, size=(3, 4))
        got = softmax_rows(x)
        want = np.array([mp_softmax_row(r) for r in x])
        assert np.abs(got - want).max() < 1e-12

    def test_large_magnitudes(self):
        out = softmax_rows([[1000.0, 0.0], [-1000.0, -1000.0]])
        assert np.isfinite(out).all()
        assert out[0].tolist() == [1.0, 0.0]
        assert out[1].tolist() == [0.5, 0.5]

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            softmax_rows([[np.nan, 0.0]])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-500, 500)))
    def test_rows_are_distributions(self, x):
        y = softmax_rows(x)
        assert (y >= 0).all()
        assert np.abs(y.sum(axis=1) - 1).max() < 1e-9


class TestMaskedSoftmax:
    def test_masked_positions_exactly_zero(self):
        y = nx.softmax(Tensor([[5.0, 1.0, 2.0]]), mask=[[False, True, True]]).value
        assert y[0, 0] == 0.0
        assert y[0, 1:].sum() == pytest.approx(1.0, abs=1e-15)

    def test_all_masked_row_rejected(self):
        with pytest.raises(NumericError):
            nx.softmax(Tensor([[1.0, 2.0]]), mask=[[False, False]])


def test_matmul_identity_exact():
    a = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(matmul2(a, np.eye(3)), a)


def test_matmul_shape_mismatch():
    with pytest.raises(NumericError):
        matmul2(np.ones((2, 3)), np.ones((2, 3)))


class TestBackward:
    def test_broadcast_add_gradient(self):
        a = Tensor(np.ones((3, 2)), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        nx.sum_(a + b).backward()
        assert b.grad.tolist() == [3.0, 3.0]
        assert a.grad.tolist() == [[1.0, 1.0]] * 3

    def test_shared_node_accumulates(self):
        a = Tensor(np.array([2.0]), requires_grad=True)
        nx.sum_(a * a + a).backward()
        assert a.grad.tolist() == [5.0]

    def test_bce_matches_naive(self):
        z = np.array([-2.0, 0.3, 4.0])
        t = np.array([0.0, 1.0, 1.0])
        p = 1 / (1 + np.exp(-z))
        naive = -(t * np.log(p) + (1 - t) * np.log(1 - p))
        assert np.allclose(nx.bce_with_logits(Tensor(z), t).value, naive, atol=1e-14)

    def test_bce_extreme_logits_finite(self):
        v = nx.bce_with_logits(Tensor(np.array([800.0, -800.0])), np.array([0.0, 1.0])).value
        assert np.allclose(v, 800.0)

    def test_dropout_inference_is_identity(self):
        a = Tensor(np.ones(5))
        assert nx.dropout(a, 0.3, None) is a

    def test_dropout_expectation(self):
        out = nx.dropout(Tensor(np.ones(200_000)), 0.3, np.random.default_rng(0)).value
        assert out.mean() == pytest.approx(1.0, abs=0.01)
        assert set(np.unique(out).round(9)) == {0.0, round(1 / 0.7, 9)}


class TestGradCheck:
    def test_quadratic(self):
        store = ParamStore(0)
        store.uniform("p", (4, 3), 1.0)
        err = grad_check(store, lambda P: nx.sum_(P["p"] * P["p"]) * 0.5)
        assert err < 1e-7

    def test_zero_params(self):
        with pytest.raises(NumericError):
            grad_check(ParamStore(0), lambda P: Tensor(0.0))

    def test_eps_range(self):
        store = ParamStore(0)
        store.zeros("p", (1,))
        with pytest.raises(NumericError):
            grad_check(store, lambda P: nx.sum_(P["p"]), eps=1e-2)

    def test_non_finite_loss_names_parameter(self):
        store = ParamStore(0)
        store.add("p", [0.0])

        def loss(P):
            v = float(P["p"].value[0])
            return nx.sum_(P["p"]) * (np.inf if v > 0 else 1.0)

        with pytest.raises(NumericError, match=r"p\[0\]"):
            grad_check(store, loss)

    @pytest.mark.parametrize("seed", range(20))
    def test_composites(self, seed):
        rng = np.random.default_rng(seed)
        store = ParamStore(seed)
        store.uniform("W", (3, 2), 0.8)
        store.uniform("V", (2, 3), 0.8)
        store.uniform("b", (3,), 0.8)
        x = rng.normal(size=(3, 4, 3))
        mask = np.array([[True, False, True], [True, True, True], [False, True, False]])
        t = rng.integers(0, 2, 3).astype(float)

        def loss(P):
            tokens = nx.tanh(nx.matmul(Tensor(x), P["W"]))
            h = nx.mean(tokens, axis=1) - nx.reshape(nx.take(tokens, 0, axis=1), (3, 2)) * 0.5
            s = nx.softmax(nx.matmul(h, P["V"]) + P["b"], mask=mask)
            z = nx.sum_(nx.concat([s, nx.sigmoid(h)], axis=1), axis=1) - 1.5
            return nx.mean(nx.bce_with_logits(z, t)) + nx.sum_(nx.transpose(s) * nx.transpose(s)) * 0.1

        assert grad_check(store, loss) < 1e-4


class TestParamStore:
    def test_seeded_init(self):
        a, b = ParamStore(3), ParamStore(3)
        assert np.array_equal(a.uniform("w", (3, 3)), b.uniform("w", (3, 3)))
        assert (np.abs(a["w"]) <= 0.1).all()

    def test_duplicate_name(self):
        s = ParamStore()
        s.zeros("w", (1,))
        with pytest.raises(KeyError):
            s.zeros("w", (1,))

    def test_grad_slots_match(self):
        s = ParamStore()
        s.uniform("a", (2, 3))
        assert s.grads["a"].shape == (2, 3)

    def test_checkpoint_round_trip(self, tmp_path):
        s = ParamStore(5)
        s.uniform("a", (2, 3))
        s.uniform("b", (4,))
        s.save(tmp_path / "c.json")
        back = ParamStore.load(tmp_path / "c.json")
        assert back.names() == s.names()
        for k in s.names():
            assert np.array_equal(back[k], s[k])

    def test_checkpoint_version(self):
        with pytest.raises(NumericError):
            ParamStore.from_json({"version": 99, "params": []})
