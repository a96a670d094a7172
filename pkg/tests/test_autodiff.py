"""Reverse-mode engine: values, gradients, determinism, error contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from versa.autodiff import (
    Graph,
    REGISTERED_OPS,
    check_registered_op_gradients,
    concat,
    finite_difference_check,
    forward_op,
    pairwise_sum,
)
from versa.errors import ContractError, DimensionError, DomainError
from versa.rng import RandomStream


class TestForwardValues:
    def test_matmul_identity(self):
        g = Graph()
        stream = RandomStream(0, "mm")
        a = stream.normal((3, 7))
        out = g.tensor(np.eye(3)) @ g.tensor(a)
        np.testing.assert_array_equal(out.values, a)

    def test_logsumexp_two_zeros(self):
        g = Graph()
        out = g.tensor([0.0, 0.0]).logsumexp(axis=0)
        assert out.values == pytest.approx(np.log(2.0), abs=1e-15)

    def test_sigmoid_zero(self):
        g = Graph()
        assert g.tensor(0.0).sigmoid().values == 0.5

    def test_matmul_shape_error_names_op_and_shapes(self):
        g = Graph()
        with pytest.raises(DimensionError, match=r"matmul.*\(3, 2\).*\(3, 2\)"):
            g.tensor(np.zeros((3, 2))) @ g.tensor(np.zeros((3, 2)))

    def test_log_domain_error(self):
        g = Graph()
        with pytest.raises(DomainError, match="log"):
            g.tensor([1.0, -1.0]).log()

    def test_unknown_op_rejected(self):
        g = Graph()
        with pytest.raises(ContractError, match="unknown operation"):
            forward_op("convolve", [g.tensor([1.0])])

    def test_registered_op_names(self):
        expected = {
            "matmul", "add", "multiply", "subtract", "exp", "log", "negate",
            "relu", "elu", "sigmoid", "sum", "mean-over-axis", "concat",
            "slice", "square", "log-sum-exp-over-axis", "softmax-over-axis",
        }
        assert set(REGISTERED_OPS) == expected

    def test_elu_matches_definition(self):
        g = Graph()
        x = np.array([-2.0, -0.5, 0.5, 2.0])
        out = g.tensor(x).elu().values
        np.testing.assert_allclose(out, np.where(x > 0, x, np.expm1(x)), rtol=1e-15)

    def test_concat_and_slice_roundtrip(self):
        g = Graph()
        a = RandomStream(1, "cs").normal((4, 3))
        t = g.tensor(a)
        back = concat([t.slice(0, 0, 2), t.slice(0, 2, 4)], axis=0)
        np.testing.assert_array_equal(back.values, a)


class TestBackward:
    def test_square_gradient(self):
        g = Graph()
        x = g.tensor([3.0])
        grads = g.backward(x.square().sum())
        np.testing.assert_allclose(grads[x.node_id], [6.0], rtol=1e-15)

    def test_constant_loss_gives_zero_gradient(self):
        g = Graph()
        x = g.tensor([1.0, 2.0])
        loss = g.tensor(5.0) * 2.0
        grads = g.backward(loss)
        np.testing.assert_array_equal(grads[x.node_id], [0.0, 0.0])

    def test_logsumexp_gradient_matches_finite_differences(self):
        # independent oracle: central differences at step 1e-5
        point = np.array([0.0, 0.0])
        step = 1e-5

        def f(t):
            return t.logsumexp(axis=0)

        g = Graph()
        x = g.tensor(point)
        analytic = g.backward(f(x))[x.node_id]
        fd = np.empty_like(point)
        for i in range(point.size):
            hi, lo = point.copy(), point.copy()
            hi[i] += step
            lo[i] -= step
            g1, g2 = Graph(), Graph()
            fd[i] = (float(f(g1.tensor(hi)).values) - float(f(g2.tensor(lo)).values)) / (2 * step)
        np.testing.assert_allclose(analytic, fd, atol=1e-9)
        np.testing.assert_allclose(analytic, [0.5, 0.5], atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        x = g.tensor([1.0, 2.0])
        with pytest.raises(ContractError, match="scalar"):
            g.backward(x.square())

    def test_empty_graph_rejected(self):
        g = Graph()
        other = Graph()
        t = other.tensor(1.0)
        with pytest.raises(ContractError):
            g.backward(t)

    def test_repeated_passes_bit_identical(self):
        def run():
            g = Graph()
            w = g.tensor(RandomStream(7, "w").normal((4, 3)))
            x = g.tensor(RandomStream(8, "x").normal((5, 4)))
            y = ((x @ w).elu().softmax(axis=1)).logsumexp(axis=1).sum()
            return g.backward(y)[w.node_id]

        a, b = run(), run()
        assert np.array_equal(a, b)

    def test_gradient_accumulates_over_reuse(self):
        g = Graph()
        x = g.tensor([2.0])
        loss = (x * x + x).sum()  # d/dx = 2x + 1 = 5
        np.testing.assert_allclose(g.backward(loss)[x.node_id], [5.0], rtol=1e-15)


class TestFiniteDifferenceCheck:
    def test_sum_of_squares_small_error(self):
        err = finite_difference_check(
            lambda t: t.square().sum(), RandomStream(0, "fd").normal((6,)), step=1e-5
        )
        assert err < 1e-6

    def test_linear_map_nearly_exact(self):
        w = RandomStream(1, "lin").normal((5,))

        def f(t):
            return (t * t.graph.tensor(w)).sum()

        err = finite_difference_check(f, RandomStream(2, "pt").normal((5,)), step=1e-5)
        assert err < 1e-10

    def test_sigmoid_dot_error_bound(self):
        w = RandomStream(3, "w").normal((5,))

        def f(t):
            return ((t * t.graph.tensor(w)).sum()).sigmoid()

        err = finite_difference_check(f, RandomStream(4, "pt").normal((5,)), step=1e-5)
        assert err < 1e-4

    def test_bad_step_rejected(self):
        with pytest.raises(ContractError):
            finite_difference_check(lambda t: t.sum(), np.ones(3), step=0.0)

    def test_every_registered_op_passes(self):
        results = check_registered_op_gradients(RandomStream(11, "ops"), instances=10)
        assert set(results) == set(REGISTERED_OPS)
        for name, err in results.items():
            assert err < 1e-4, f"{name}: {err}"


class TestReductionProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=40), st.integers(0, 10_000))
    def test_softmax_rows_sum_to_one(self, values, seed):
        g = Graph()
        row = np.asarray(values)[None, :]
        out = g.tensor(row).softmax(axis=1).values
        assert abs(out.sum() - 1.0) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-700, 700), min_size=1, max_size=40))
    def test_logsumexp_at_least_max(self, values):
        g = Graph()
        arr = np.asarray(values)
        out = float(g.tensor(arr).logsumexp(axis=0).values)
        assert out >= arr.max()

    def test_pairwise_sum_matches_numpy(self):
        a = RandomStream(5, "ps").normal((13, 4))
        np.testing.assert_allclose(pairwise_sum(a, 0), a.sum(axis=0), rtol=1e-12)

    def test_pairwise_sum_exact_on_adjacent_duplicates(self):
        a = RandomStream(6, "dup").normal((9, 3))
        doubled = np.repeat(a, 2, axis=0)
        assert np.array_equal(pairwise_sum(doubled, 0), 2.0 * pairwise_sum(a, 0))

    def test_sum_axis_none_scalar(self):
        g = Graph()
        out = g.tensor(np.arange(6.0).reshape(2, 3)).sum()
        assert out.shape == ()
        assert float(out.values) == 15.0

    def test_broadcasting_add_gradient(self):
        g = Graph()
        a = g.tensor(RandomStream(9, "a").normal((4, 3)))
        b = g.tensor(RandomStream(9, "b").normal((3,)))
        loss = (a + b).square().sum()
        grads = g.backward(loss)
        assert grads[b.node_id].shape == (3,)
        np.testing.assert_allclose(
            grads[b.node_id], (2 * (a.values + b.values)).sum(axis=0), rtol=1e-12
        )
