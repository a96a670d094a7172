"""Diagonal Gaussian machinery on differentiation graphs.

A :class:`DiagGaussian` holds a mean vector and a log-variance vector as graph
tensors, so densities, reparameterized samples, KL divergences and logit
distributions stay differentiable w.r.t. whatever produced the parameters.

Point estimates are represented as Gaussians whose log-variance is exactly
-inf everywhere; sampling and logit construction detect this and take the
noise-free affine path, which keeps those code paths bit-identical to plain
affine maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor, concat
from .errors import DimensionError
from .rng import RandomStream

LOG_TWO_PI = float(np.log(2.0 * np.pi))

__all__ = [
    "DiagGaussian",
    "GaussianPrior",
    "log_prob",
    "sample",
    "sample_many",
    "kl_divergence",
    "local_reparam_logits",
    "local_reparam_logit_samples",
]


@dataclass(frozen=True)
class DiagGaussian:
    """Factorized Gaussian with mean and log-variance tensors of equal length."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape or self.mean.ndim != 1:
            raise DimensionError(
                f"DiagGaussian: mean {self.mean.shape} and log_var {self.log_var.shape} "
                "must be equal-length vectors"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def graph(self) -> Graph:
        return self.mean.graph

    @property
    def is_point_estimate(self) -> bool:
        return bool(np.all(np.isneginf(self.log_var.values)))

    @staticmethod
    def constant(graph: Graph, mean, log_var) -> "DiagGaussian":
        return DiagGaussian(graph.tensor(mean), graph.tensor(log_var))

    @staticmethod
    def point_estimate(mean: Tensor) -> "DiagGaussian":
        log_var = mean.graph.tensor(np.full(mean.shape, -np.inf))
        return DiagGaussian(mean, log_var)


@dataclass(frozen=True)
class GaussianPrior:
    """Graph-independent Gaussian spec, promoted onto a graph where needed."""

    mean: float = 0.0
    variance: float = 1.0

    def as_gaussian(self, graph: Graph, dim: int) -> DiagGaussian:
        return DiagGaussian.constant(
            graph,
            np.full(dim, self.mean),
            np.full(dim, np.log(self.variance)),
        )


def log_prob(d: DiagGaussian, x) -> Tensor:
    """Scalar log-density of ``x`` under ``d``.

    sum_i [ -0.5 ln(2 pi) - 0.5 log_var_i - (x_i - mean_i)^2 / (2 var_i) ]
    """
    g = d.graph
    x = x if isinstance(x, Tensor) else g.tensor(x)
    if x.shape != d.mean.shape:
        raise DimensionError(f"log_prob: point shape {x.shape} != mean shape {d.mean.shape}")
    diff_sq = (x - d.mean).square()
    quad = diff_sq * (-d.log_var).exp()
    terms = (d.log_var + quad) * -0.5 - (0.5 * LOG_TWO_PI)
    return terms.sum()


def sample(d: DiagGaussian, stream: RandomStream) -> Tensor:
    """One reparameterized draw: mean + exp(log_var / 2) * eps."""
    if d.is_point_estimate:
        return d.mean
    eps = d.graph.tensor(stream.normal((d.dim,)))
    return d.mean + (d.log_var * 0.5).exp() * eps


def sample_many(d: DiagGaussian, n: int, stream: RandomStream) -> Tensor:
    """``n`` reparameterized draws as an [n, dim] tensor (one rng call)."""
    eps = d.graph.tensor(
        np.zeros((n, d.dim)) if d.is_point_estimate else stream.normal((n, d.dim))
    )
    return d.mean + (d.log_var * 0.5).exp() * eps


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, as a scalar tensor."""
    if q.dim != p.dim:
        raise DimensionError(f"kl_divergence: dims {q.dim} and {p.dim} differ")
    inv_p_var = (-p.log_var).exp()
    ratio = q.log_var.exp() * inv_p_var
    shift = (q.mean - p.mean).square() * inv_p_var
    terms = (ratio + shift - 1.0 + p.log_var - q.log_var) * 0.5
    return terms.sum()


def _class_logit_moments(features: Tensor, factor: DiagGaussian):
    """Mean and variance columns [M, 1] of the induced logit distribution.

    For weight posterior N(mu, diag(sigma^2)) over (w, b), the logit at
    feature row h is Gaussian with mean h.mu_w + mu_b and variance
    sum_j h_j^2 sigma_w_j^2 + sigma_b^2.
    """
    d = features.shape[1]
    if factor.dim != d + 1:
        raise DimensionError(
            f"local_reparam_logits: factor dim {factor.dim} != feature dim {d} + 1"
        )
    w_mean = factor.mean.slice(0, 0, d)
    b_mean = factor.mean.slice(0, d, d + 1)
    mean_col = (features * w_mean).sum(axis=1, keepdims=True) + b_mean
    if factor.is_point_estimate:
        return mean_col, None
    w_var = factor.log_var.slice(0, 0, d).exp()
    b_var = factor.log_var.slice(0, d, d + 1).exp()
    var_col = (features.square() * w_var).sum(axis=1, keepdims=True) + b_var
    return mean_col, var_col


def local_reparam_logits(
    features: Tensor, factors: list[DiagGaussian], stream: RandomStream
) -> Tensor:
    """One [M, C] draw from the induced per-class logit distributions.

    Zero-variance factors contribute their affine mean column unchanged, so a
    fully deterministic posterior reduces this to a plain affine map.
    """
    cols = []
    for factor in factors:
        mean_col, var_col = _class_logit_moments(features, factor)
        if var_col is None:
            cols.append(mean_col)
        else:
            eps = features.graph.tensor(stream.normal((features.shape[0], 1)))
            cols.append(mean_col + (var_col.log() * 0.5).exp() * eps)
    return concat(cols, axis=1)


def local_reparam_logit_samples(
    features: Tensor, factors: list[DiagGaussian], n_samples: int, stream: RandomStream
) -> Tensor:
    """[n_samples, M, C] logit draws, vectorized over samples per class."""
    g = features.graph
    m = features.shape[0]
    cols = []
    for factor in factors:
        mean_col, var_col = _class_logit_moments(features, factor)
        if var_col is None:
            cols.append(mean_col + g.tensor(np.zeros((n_samples, m, 1))))
        else:
            eps = g.tensor(stream.normal((n_samples, m, 1)))
            cols.append(mean_col + (var_col.log() * 0.5).exp() * eps)
    return concat(cols, axis=2)
