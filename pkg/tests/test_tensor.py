import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ndcr.errors import NonFiniteError, ShapeError
from ndcr.tensor import Tensor, concat, dropout, layer_norm, no_grad, trace_relu


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


class TestForward:
    def test_softmax_of_zeros_is_uniform(self):
        assert np.allclose(Tensor([0.0, 0.0]).softmax().data, [0.5, 0.5])

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=finite))
    def test_softmax_normalized_and_positive(self, x):
        p = Tensor(x).softmax(axis=-1).data
        assert np.all(p > 0)
        assert np.allclose(p.sum(-1), 1.0, atol=1e-6)

    def test_softmax_matches_reference_for_large_logits(self):
        x = np.array([[1000.0, 999.0, -1000.0]])
        assert np.allclose(Tensor(x).softmax().data, oracles.softmax(x))

    def test_log_softmax_matches_reference(self):
        x = np.random.default_rng(0).normal(size=(3, 5)) * 20
        assert np.allclose(Tensor(x).log_softmax().data, oracles.log_softmax(x))

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-60, 60)))
    def test_sigmoid_in_closed_unit_interval(self, x):
        s = Tensor(x).sigmoid().data
        assert np.all((s >= 0) & (s <= 1))
        assert np.allclose(s, 1 / (1 + np.exp(-x)))

    def test_layer_norm_matches_reference(self):
        rng = np.random.default_rng(1)
        x, g, b = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)
        out = layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
        assert np.allclose(out, oracles.layer_norm(x, g, b))

    @pytest.mark.parametrize("shape_b", [(5, 3), (2, 5, 3)])
    def test_matmul_paths_agree_with_numpy(self, shape_b):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 4, 5)), rng.normal(size=shape_b)
        assert np.allclose((Tensor(a) @ Tensor(b)).data, a @ b)

    def test_concat(self):
        a, b = np.ones((2, 3)), np.zeros((2, 1))
        assert concat([Tensor(a), Tensor(b)], axis=-1).shape == (2, 4)

    def test_dtype_preserved(self):
        assert (Tensor(np.ones(3, np.float32)) * 2.0).dtype == np.float32
        assert (Tensor(np.ones(3)) * 2.0).dtype == np.float64


class TestErrors:
    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError) as err:
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))
        assert err.value.op == "add"
        assert err.value.shapes == ((2, 3), (4, 3))
        assert "(2, 3)" in str(err.value) and "(4, 3)" in str(err.value)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError) as err:
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 3)))
        assert err.value.op == "matmul"

    def test_non_finite_names_op(self):
        with pytest.raises(NonFiniteError) as err:
            Tensor(np.array([0.0])).log()
        assert err.value.op == "log"

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_overflow_is_caught(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1e300])) * 1e300

    def test_backward_needs_scalar(self):
        with pytest.raises(ShapeError):
            (leaf(np.ones(3)) * 2.0).backward()


class TestGradients:
    def test_sigmoid_grad_at_zero(self):
        x = leaf([0.0])
        x.sigmoid().sum().backward()
        assert x.grad[0] == pytest.approx(0.25)

    def test_two_layer_perceptron_against_finite_differences(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(5, 4))
        params = {"w1": rng.normal(size=(4, 6)), "b1": rng.normal(size=6),
                  "w2": rng.normal(size=(6, 2)), "b2": rng.normal(size=2)}

        def loss_np(p):
            h = np.maximum(X @ p["w1"] + p["b1"], 0)
            return float(((h @ p["w2"] + p["b2"]) ** 2).sum())

        leaves = {k: leaf(v) for k, v in params.items()}
        h = (Tensor(X) @ leaves["w1"] + leaves["b1"]).relu()
        out = h @ leaves["w2"] + leaves["b2"]
        (out * out).sum().backward()
        for name, value in params.items():
            def f(x, name=name):
                return loss_np({**params, name: x})

            numeric = oracles.central_difference(f, value)
            err = np.linalg.norm(leaves[name].grad - numeric) / max(np.linalg.norm(numeric), 1e-12)
            assert err <= 1e-4, name

    @pytest.mark.parametrize("op", ["tanh", "sigmoid", "exp", "sqrt", "log", "softmax", "log_softmax"])
    def test_unary_ops(self, op):
        rng = np.random.default_rng(4)
        x0 = rng.uniform(0.5, 2.0, size=(3, 4))
        w = rng.normal(size=(3, 4))
        x = leaf(x0)
        (getattr(x, op)() * Tensor(w)).sum().backward()

        def f(v):
            return float((getattr(Tensor(v), op)().data * w).sum())

        assert np.allclose(x.grad, oracles.central_difference(f, x0), atol=1e-6)

    def test_layer_norm_gradients(self):
        rng = np.random.default_rng(5)
        x0, g0, b0, w = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5), rng.normal(size=(3, 5))
        x, g, b = leaf(x0), leaf(g0), leaf(b0)
        (layer_norm(x, g, b) * Tensor(w)).sum().backward()
        assert np.allclose(x.grad, oracles.central_difference(
            lambda v: float((oracles.layer_norm(v, g0, b0) * w).sum()), x0), atol=1e-6)
        assert np.allclose(g.grad, oracles.central_difference(
            lambda v: float((oracles.layer_norm(x0, v, b0) * w).sum()), g0), atol=1e-6)

    @pytest.mark.parametrize("a_shape,b_shape", [((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5)), ((3, 4), (4, 2))])
    def test_matmul_gradients(self, a_shape, b_shape):
        rng = np.random.default_rng(6)
        a0, b0 = rng.normal(size=a_shape), rng.normal(size=b_shape)
        a, b = leaf(a0), leaf(b0)
        out = a @ b
        w = rng.normal(size=out.shape)
        (out * Tensor(w)).sum().backward()
        assert np.allclose(a.grad, oracles.central_difference(lambda v: float(((v @ b0) * w).sum()), a0), atol=1e-6)
        assert np.allclose(b.grad, oracles.central_difference(lambda v: float(((a0 @ v) * w).sum()), b0), atol=1e-6)

    def test_broadcast_gradient_is_reduced(self):
        a, b = leaf(np.ones((3, 4))), leaf(np.ones(4))
        (a * b).sum().backward()
        assert b.grad.shape == (4,)
        assert np.allclose(b.grad, 3.0)

    def test_repeated_index_accumulates(self):
        x = leaf(np.arange(4.0))
        x[np.array([0, 0, 2])].sum().backward()
        assert np.allclose(x.grad, [2, 0, 1, 0])

    def test_shared_subexpression_accumulates(self):
        x = leaf([3.0])
        y = x * x
        (y + y).sum().backward()
        assert x.grad[0] == pytest.approx(12.0)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_relu_trace_records_masks(self):
        with trace_relu() as trace:
            Tensor(np.array([-1.0, 2.0])).relu()
        assert len(trace) == 1 and trace[0].tolist() == [False, True]


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = Tensor(np.ones(10))
        assert dropout(x, 0.0, np.random.default_rng(0), True) is x

    def test_eval_is_identity(self):
        x = Tensor(np.ones(10))
        assert dropout(x, 0.5, np.random.default_rng(0), False) is x

    def test_inverted_scaling_preserves_mean(self):
        out = dropout(Tensor(np.ones(200_000)), 0.25, np.random.default_rng(0), True).data
        assert set(np.unique(out)) <= {0.0, 1 / 0.75}
        assert out.mean() == pytest.approx(1.0, abs=0.01)

    def test_training_needs_rng(self):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(3)), 0.5, None, True)


class TestDeterminism:
    def test_bitwise_identical_runs(self):
        def run():
            rng = np.random.default_rng(7)
            w = leaf(rng.normal(size=(8, 8)))
            x = Tensor(rng.normal(size=(4, 8)))
            h = dropout((x @ w).tanh(), 0.1, rng, True)
            h.softmax().log().sum().backward()
            return h.data.tobytes(), w.grad.tobytes()

        assert run() == run()
