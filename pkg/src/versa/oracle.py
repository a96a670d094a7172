"""Analytic ground truth for the scalar normal-normal model and cluster tasks.

Everything in this module is closed-form or quadrature over plain numpy
arrays.  It intentionally has no dependency on the autodiff engine so the
oracle and the system under test cannot share bugs.

Model: psi ~ N(0, prior_var), y_n | psi ~ N(psi, obs_var).  The posterior,
marginal likelihood (evidence) and posterior predictive are all Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_TWO_PI = float(np.log(2.0 * np.pi))

__all__ = [
    "ConjugatePosterior",
    "true_posterior",
    "predictive_log_density",
    "quadrature_predictive",
    "gaussian_kl",
    "bayes_log_posteriors",
    "optimal_toy_amortization",
]


@dataclass(frozen=True)
class ConjugatePosterior:
    mean: float
    variance: float
    log_evidence: float


def _normal_log_density(x: float, mean: float, variance: float) -> float:
    return -0.5 * (LOG_TWO_PI + np.log(variance)) - (x - mean) ** 2 / (2.0 * variance)


def true_posterior(prior_var: float, obs_var: float, observations) -> ConjugatePosterior:
    """Exact posterior and evidence after conditioning on ``observations``.

    mean = prior_var * sum(y) / (n * prior_var + obs_var)
    variance = prior_var * obs_var / (n * prior_var + obs_var)

    The evidence accumulates as a product of one-step-ahead predictives
    (each a Gaussian convolution of the running posterior with the noise).
    """
    y = np.asarray(observations, dtype=np.float64).reshape(-1)
    mean, variance = 0.0, float(prior_var)
    log_evidence = 0.0
    for value in y:
        log_evidence += _normal_log_density(value, mean, variance + obs_var)
        precision = 1.0 / variance + 1.0 / obs_var
        mean = (mean / variance + value / obs_var) / precision
        variance = 1.0 / precision
    n = y.size
    mean_direct = prior_var * y.sum() / (n * prior_var + obs_var)
    variance_direct = prior_var * obs_var / (n * prior_var + obs_var)
    return ConjugatePosterior(float(mean_direct), float(variance_direct), float(log_evidence))


def predictive_log_density(posterior: ConjugatePosterior, obs_var: float, y: float) -> float:
    """Closed-form posterior predictive: N(y; mean, variance + obs_var)."""
    return float(_normal_log_density(y, posterior.mean, posterior.variance + obs_var))


def quadrature_predictive(
    posterior: ConjugatePosterior, obs_var: float, y: float, nodes: int = 10_000
) -> float:
    """Trapezoid integration of the predictive over psi in [mean +- 10 sd]."""
    sd = np.sqrt(posterior.variance)
    grid = np.linspace(posterior.mean - 10.0 * sd, posterior.mean + 10.0 * sd, nodes)
    log_integrand = _normal_log_density(y, grid, obs_var) + _normal_log_density(
        grid, posterior.mean, posterior.variance
    )
    density = np.trapezoid(np.exp(log_integrand), grid)
    return float(np.log(density))


def gaussian_kl(mean_q: float, var_q: float, mean_p: float, var_p: float) -> float:
    """KL(N(mean_q, var_q) || N(mean_p, var_p)) for scalar Gaussians."""
    return float(
        0.5 * ((var_q + (mean_q - mean_p) ** 2) / var_p - 1.0 + np.log(var_p / var_q))
    )


def bayes_log_posteriors(means: np.ndarray, cluster_var: float, x: np.ndarray) -> np.ndarray:
    """Log p(class | x) for the isotropic Gaussian cluster model, equal priors.

    ``means`` is [C, dim]; ``x`` is [dim] or [M, dim]; returns [C] or [M, C].
    """
    means = np.asarray(means, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    sq = ((pts[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    log_lik = -sq / (2.0 * cluster_var)  # shared normalizer cancels in the softmax
    log_post = log_lik - _logsumexp_rows(log_lik)
    return log_post[0] if single else log_post


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))


def optimal_toy_amortization(prior_var: float, obs_var: float, n_context: int):
    """Linear amortization weights making q equal the exact posterior.

    The posterior mean is linear in sum(y) with slope prior_var / (n prior_var
    + obs_var) and zero intercept, and the posterior variance is a constant,
    so with the exp link on the variance the optimal weights are exact for a
    fixed number of observations.
    """
    denom = n_context * prior_var + obs_var
    return {
        "w_mu": prior_var / denom,
        "b_mu": 0.0,
        "w_sigma": 0.0,
        "b_sigma": float(np.log(prior_var * obs_var / denom)),
    }
