"""Conjugate normal-normal oracle: posterior, evidence, predictive, Bayes rule."""

import numpy as np
import pytest

from versa.oracle import (
    bayes_log_posteriors,
    gaussian_kl,
    optimal_toy_amortization,
    predictive_log_density,
    quadrature_predictive,
    true_posterior,
)
from versa.rng import RandomStream


class TestTruePosterior:
    def test_no_data_returns_prior(self):
        post = true_posterior(2.5, 0.3, [])
        assert post.mean == 0.0
        assert post.variance == 2.5
        assert post.log_evidence == 0.0

    def test_five_ones(self):
        # conjugate update with prior_var = obs_var = 1 and y = (1,1,1,1,1)
        post = true_posterior(1.0, 1.0, np.ones(5))
        assert post.mean == pytest.approx(5.0 / 6.0, abs=1e-14)
        assert post.variance == pytest.approx(1.0 / 6.0, abs=1e-14)

    def test_large_sample_concentrates_on_mean(self):
        y = 0.3 + 0.5 * RandomStream(0, "big").normal((100_000,))
        post = true_posterior(1.0, 0.25, y)
        assert abs(post.mean - y.mean()) < 1e-4
        assert post.variance < 1e-4

    def test_variance_decreases_with_data(self):
        y = RandomStream(1, "nested").normal((30,))
        variances = [true_posterior(1.0, 0.25, y[:n]).variance for n in range(31)]
        assert all(b < a for a, b in zip(variances, variances[1:]))

    def test_nested_posteriors_strictly_apart(self):
        y = RandomStream(2, "chain").normal((10,)) + 0.4
        for n in range(1, 10):
            a = true_posterior(1.0, 0.25, y[:n])
            b = true_posterior(1.0, 0.25, y[: n + 1])
            assert gaussian_kl(a.mean, a.variance, b.mean, b.variance) > 0.0

    def test_evidence_matches_direct_formula(self):
        # direct joint-integration form of the marginal vs the sequential product
        y = RandomStream(3, "ev").normal((7,)) * 0.6 + 0.2
        prior_var, obs_var = 1.3, 0.4
        post = true_posterior(prior_var, obs_var, y)
        n = y.size
        a = n / obs_var + 1.0 / prior_var
        b = y.sum() / obs_var
        direct = (
            -0.5 * n * np.log(2 * np.pi * obs_var)
            - 0.5 * np.log(2 * np.pi * prior_var)
            + 0.5 * np.log(2 * np.pi / a)
            + b**2 / (2 * a)
            - (y**2).sum() / (2 * obs_var)
        )
        assert post.log_evidence == pytest.approx(direct, abs=1e-10)


class TestQuadraturePredictive:
    def test_matches_closed_form_at_mean(self):
        post = true_posterior(1.0, 0.25, [0.4, 0.9])
        lhs = quadrature_predictive(post, 0.25, post.mean)
        rhs = -0.5 * np.log(2 * np.pi * (post.variance + 0.25))
        assert lhs == pytest.approx(rhs, abs=1e-8)

    def test_point_posterior_limit(self):
        from versa.oracle import ConjugatePosterior

        post = ConjugatePosterior(mean=0.3, variance=1e-12, log_evidence=0.0)
        value = quadrature_predictive(post, 0.5, 0.8)
        expected = -0.5 * np.log(2 * np.pi * 0.5) - (0.8 - 0.3) ** 2 / (2 * 0.5)
        assert value == pytest.approx(expected, abs=1e-6)

    def test_random_points_agree_with_closed_form(self):
        stream = RandomStream(4, "quad")
        for k in range(10):
            y = stream.normal((4,)) * 0.7
            post = true_posterior(1.0, 0.25, y)
            point = float(stream.normal()) * 1.5
            assert quadrature_predictive(post, 0.25, point) == pytest.approx(
                predictive_log_density(post, 0.25, point), abs=1e-8
            )


class TestBayesClassifier:
    def test_equidistant_point_uniform(self):
        means = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        log_post = bayes_log_posteriors(means, 0.5, np.zeros(2))
        np.testing.assert_allclose(np.exp(log_post), 0.25, atol=1e-12)

    def test_dominant_class_at_its_mean(self):
        means = 10.0 * np.eye(3)
        log_post = bayes_log_posteriors(means, 0.25, means[1])
        assert np.exp(log_post[1]) > 0.999

    def test_two_class_discriminant(self):
        # sigmoid((|x-m2|^2 - |x-m1|^2) / (2 sigma^2)) at x=0.5, means +-1, sigma=1
        means = np.array([[1.0], [-1.0]])
        log_post = bayes_log_posteriors(means, 1.0, np.array([0.5]))
        expected = 1.0 / (1.0 + np.exp(-((0.5 + 1) ** 2 - (0.5 - 1) ** 2) / 2.0))
        assert np.exp(log_post[0]) == pytest.approx(expected, abs=1e-12)
        assert np.exp(log_post[0]) == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_normalization(self):
        stream = RandomStream(5, "bayes")
        means = stream.normal((6, 3))
        points = stream.normal((50, 3))
        log_post = bayes_log_posteriors(means, 0.8, points)
        np.testing.assert_allclose(np.exp(log_post).sum(axis=1), 1.0, atol=1e-12)


class TestOptimalToyAmortization:
    def test_exact_recovery_for_fixed_context_size(self):
        prior_var, obs_var, n = 1.0, 0.25, 5
        weights = optimal_toy_amortization(prior_var, obs_var, n)
        stream = RandomStream(6, "opt")
        for k in range(20):
            y = np.sqrt(prior_var) * float(stream.normal()) + np.sqrt(obs_var) * stream.normal((n,))
            truth = true_posterior(prior_var, obs_var, y)
            q_mean = weights["w_mu"] * y.sum() + weights["b_mu"]
            q_var = np.exp(weights["w_sigma"] * y.sum() + weights["b_sigma"])
            assert gaussian_kl(truth.mean, truth.variance, q_mean, q_var) < 1e-12
