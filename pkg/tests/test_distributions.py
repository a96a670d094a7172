"""Diagonal Gaussian machinery: densities, sampling, KL, logit distributions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from versa.autodiff import Graph
from versa.distributions import (
    DiagGaussian,
    kl_divergence,
    local_reparam_logit_samples,
    local_reparam_logits,
    log_prob,
    sample,
    sample_many,
)
from versa.errors import DimensionError
from versa.rng import RandomStream

LOG_2PI = np.log(2.0 * np.pi)


def gaussian(g, mean, log_var):
    return DiagGaussian.constant(g, mean, log_var)


class TestLogProb:
    def test_standard_normal_at_zero(self):
        g = Graph()
        value = float(log_prob(gaussian(g, [0.0], [0.0]), [0.0]).values)
        assert value == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_mode_density(self):
        g = Graph()
        var = 0.37
        d = gaussian(g, [1.3], [np.log(var)])
        assert float(log_prob(d, [1.3]).values) == pytest.approx(
            -0.5 * np.log(2 * np.pi * var), abs=1e-12
        )

    def test_two_sigma_point(self):
        # plug into the density formula: N(0,1) at 2 -> -(1/2)ln(2pi) - 2
        g = Graph()
        value = float(log_prob(gaussian(g, [0.0], [0.0]), [2.0]).values)
        assert value == pytest.approx(-0.9189385332046727 - 2.0, abs=1e-12)

    def test_length_mismatch(self):
        g = Graph()
        with pytest.raises(DimensionError):
            log_prob(gaussian(g, [0.0, 0.0], [0.0, 0.0]), [1.0])

    def test_density_integrates_to_one(self):
        # trapezoid quadrature over [mu - 8 sd, mu + 8 sd]
        g = Graph()
        mean, var = 0.7, 2.3
        xs = np.linspace(mean - 8 * np.sqrt(var), mean + 8 * np.sqrt(var), 20_001)
        dens = [
            float(np.exp(log_prob(gaussian(Graph(), [mean], [np.log(var)]), [x]).values))
            for x in xs[:: 100]
        ]
        # dense quadrature in closed form to keep runtime down, verified
        # against the sparse graph evaluations above
        full = np.exp(-0.5 * (xs - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)
        np.testing.assert_allclose(dens, full[::100], rtol=1e-12)
        assert abs(np.trapezoid(full, xs) - 1.0) < 1e-6


class TestSample:
    def test_tiny_variance_collapses_to_mean(self):
        g = Graph()
        d = gaussian(g, [0.4, -0.2], [-60.0, -60.0])
        out = sample(d, RandomStream(0, "s")).values
        assert np.max(np.abs(out - np.array([0.4, -0.2]))) < 1e-12

    def test_fixed_seed_reproducible(self):
        def draw():
            g = Graph()
            return sample(gaussian(g, [0.0], [0.0]), RandomStream(42, "fixed")).values

        assert np.array_equal(draw(), draw())

    def test_moments_match_large_sample(self):
        # Monte-Carlo law-of-large-numbers check: N(1, 4), 1e5 draws
        g = Graph()
        d = gaussian(g, [1.0], [np.log(4.0)])
        draws = sample_many(d, 100_000, RandomStream(7, "mc")).values[:, 0]
        assert abs(draws.mean() - 1.0) < 0.03
        assert abs(draws.var() - 4.0) < 0.15

    def test_point_estimate_sampling_exact(self):
        g = Graph()
        mean = g.tensor([1.0, 2.0])
        d = DiagGaussian.point_estimate(mean)
        assert sample(d, RandomStream(0, "p")) is mean
        out = sample_many(d, 3, RandomStream(0, "p")).values
        np.testing.assert_array_equal(out, np.tile([1.0, 2.0], (3, 1)))

    def test_reparameterization_differentiable(self):
        g = Graph()
        mean = g.tensor([0.5])
        log_var = g.tensor([-1.0])
        d = DiagGaussian(mean, log_var)
        loss = sample(d, RandomStream(3, "grad")).square().sum()
        grads = g.backward(loss)
        assert grads[mean.node_id].shape == (1,)
        assert np.any(grads[mean.node_id] != 0.0)
        assert np.any(grads[log_var.node_id] != 0.0)


class TestKL:
    def test_identical_is_zero(self):
        g = Graph()
        q = gaussian(g, [0.3, -0.1], [0.2, -0.4])
        assert float(kl_divergence(q, q).values) == 0.0

    def test_unit_mean_shift(self):
        # closed-form Gaussian KL: KL(N(1,1) || N(0,1)) = 1/2
        g = Graph()
        value = float(kl_divergence(gaussian(g, [1.0], [0.0]), gaussian(g, [0.0], [0.0])).values)
        assert value == pytest.approx(0.5, abs=1e-14)

    def test_variance_four(self):
        # (1/2)(4 - 1 - ln 4)
        g = Graph()
        value = float(
            kl_divergence(gaussian(g, [0.0], [np.log(4.0)]), gaussian(g, [0.0], [0.0])).values
        )
        assert value == pytest.approx(0.5 * (4 - 1 - np.log(4.0)), abs=1e-13)
        assert value == pytest.approx(0.8068528194400547, abs=1e-12)

    def test_length_mismatch(self):
        g = Graph()
        with pytest.raises(DimensionError):
            kl_divergence(gaussian(g, [0.0], [0.0]), gaussian(g, [0.0, 0.0], [0.0, 0.0]))

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.floats(-3, 3), min_size=1, max_size=6),
        st.data(),
    )
    def test_nonnegative_for_random_pairs(self, mean_q, data):
        n = len(mean_q)
        mean_p = data.draw(st.lists(st.floats(-3, 3), min_size=n, max_size=n))
        lv_q = data.draw(st.lists(st.floats(-4, 3), min_size=n, max_size=n))
        lv_p = data.draw(st.lists(st.floats(-4, 3), min_size=n, max_size=n))
        g = Graph()
        value = float(kl_divergence(gaussian(g, mean_q, lv_q), gaussian(g, mean_p, lv_p)).values)
        assert value >= -1e-12


class TestLocalReparamLogits:
    def _posterior(self, g, d, means, log_vars):
        return DiagGaussian.constant(g, means, log_vars)

    def test_zero_variance_equals_affine_bitwise(self):
        g = Graph()
        stream = RandomStream(0, "lrp")
        h = g.tensor(stream.normal((6, 4)))
        mean = stream.normal(5)
        factors = [DiagGaussian.constant(g, mean, np.full(5, -np.inf))]
        logits = local_reparam_logits(h, factors, RandomStream(1, "draw"))
        affine = (h * g.tensor(mean[:4])).sum(axis=1, keepdims=True) + g.tensor(mean[4:])
        assert np.array_equal(logits.values, affine.values)

    def test_zero_features_gives_bias_distribution(self):
        g = Graph()
        h = g.tensor(np.zeros((40_000, 2)))
        factors = [DiagGaussian.constant(g, [5.0, -5.0, 0.7], [0.0, 0.0, np.log(2.0)])]
        draws = local_reparam_logits(h, factors, RandomStream(2, "bias")).values[:, 0]
        assert abs(draws.mean() - 0.7) < 0.05
        assert abs(draws.var() - 2.0) < 0.1

    def test_moments_match_analytic(self):
        # Monte-Carlo moment check against the closed-form logit moments
        g = Graph()
        stream = RandomStream(3, "mom")
        h_row = stream.normal(3)
        w_mean, b_mean = stream.normal(3), 0.4
        w_logvar = np.log(np.abs(stream.normal(3)) + 0.3)
        b_logvar = np.log(0.5)
        mean_ref = float(h_row @ w_mean + b_mean)
        var_ref = float((h_row**2) @ np.exp(w_logvar) + np.exp(b_logvar))
        h = g.tensor(np.tile(h_row, (1, 1)))
        factors = [
            DiagGaussian.constant(
                g,
                np.concatenate([w_mean, [b_mean]]),
                np.concatenate([w_logvar, [b_logvar]]),
            )
        ]
        draws = local_reparam_logit_samples(h, factors, 100_000, RandomStream(4, "d")).values
        assert abs(draws.mean() - mean_ref) < 0.01 * max(1.0, abs(mean_ref))
        assert abs(draws.var() - var_ref) < 0.01 * var_ref

    def test_dimension_mismatch(self):
        g = Graph()
        h = g.tensor(np.zeros((2, 3)))
        factors = [DiagGaussian.constant(g, np.zeros(3), np.zeros(3))]  # needs 3 + 1
        with pytest.raises(DimensionError):
            local_reparam_logits(h, factors, RandomStream(0, "x"))

    def test_sample_tensor_shape(self):
        g = Graph()
        h = g.tensor(RandomStream(5, "sh").normal((7, 4)))
        factors = [
            DiagGaussian.constant(g, RandomStream(6, "f", c).normal(5), np.full(5, -2.0))
            for c in range(3)
        ]
        out = local_reparam_logit_samples(h, factors, 11, RandomStream(7, "draws"))
        assert out.shape == (11, 7, 3)
