"""Adaptation strategies: dataset -> task posterior, behind one interface.

Each strategy maps an episode's context set and the shared feature extractor
into a :class:`TaskPosterior`.  The amortized strategy emits full diagonal
Gaussians; the other three emit point estimates (zero-variance factors), so
prediction is deterministic for any sample count.

Every strategy carries instrumentation counters: ``optimizer_steps`` counts
test-time optimizer iterations (zero for everything here) and
``gradient_evaluations`` counts explicit gradient computations (exactly one
per adapted episode for the one-step-gradient strategy, zero otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, concat
from .distributions import DiagGaussian
from .errors import ContractError
from .networks import (
    ROLE_BASELINE_INIT,
    ParameterStore,
    TaskPosterior,
    canonical_row_order,
    pooled_row_mean,
    _squeeze_row,
)
from .rng import RandomStream
from .tasks import Episode

STRATEGY_KINDS = ("versa", "prototypical", "one-step-gradient", "amortized-map")

__all__ = [
    "STRATEGY_KINDS",
    "AdaptationCounters",
    "VersaStrategy",
    "PrototypicalStrategy",
    "OneStepGradientStrategy",
    "AmortizedMapStrategy",
    "make_strategy",
]


@dataclass
class AdaptationCounters:
    optimizer_steps: int = 0
    gradient_evaluations: int = 0

    def snapshot(self):
        return (self.optimizer_steps, self.gradient_evaluations)


@dataclass
class _StrategyBase:
    counters: AdaptationCounters = field(default_factory=AdaptationCounters)
    way_dependent_parameters: bool = False

    def reset_counters(self):
        self.counters = AdaptationCounters()

    def add_parameters(self, store: ParameterStore, model, way: int,
                       stream: RandomStream) -> None:
        """Hook for strategies that meta-learn extra parameters."""

    def adapt(self, g: Graph, leaves, model, episode: Episode) -> TaskPosterior:
        raise NotImplementedError


class VersaStrategy(_StrategyBase):
    """Full amortized posterior: a single forward pass per class."""

    kind = "versa"

    def adapt(self, g, leaves, model, episode):
        return model.build_task_posterior(g, leaves, episode)


class AmortizedMapStrategy(_StrategyBase):
    """The amortized posterior collapsed to its mean (a conditional model)."""

    kind = "amortized-map"

    def adapt(self, g, leaves, model, episode):
        return model.build_task_posterior(g, leaves, episode).as_point_estimate()


class PrototypicalStrategy(_StrategyBase):
    """Class means in feature space as zero-variance classifier weights.

    w_c is the mean feature of class c's context rows and b_c = -|w_c|^2 / 2,
    so the induced softmax matches the one over negative squared Euclidean
    distances to the class means (the per-point |h|^2 term cancels).
    """

    kind = "prototypical"

    def adapt(self, g, leaves, model, episode):
        factors = []
        way = episode.way if episode.way is not None else int(episode.context_y.max()) + 1
        for c in range(way):
            rows = episode.context_x[episode.context_y == c]
            if rows.shape[0] == 0:
                raise ContractError(f"class {c} has zero context shots")
            rows = rows[canonical_row_order(rows)]
            feats = model.extract_features(g, leaves, rows)
            proto = pooled_row_mean(feats, canonical_row_order(feats.values))  # [1, d]
            bias = proto.square().sum(axis=1, keepdims=True) * -0.5  # [1, 1]
            mean = _squeeze_row(concat([proto, bias], axis=1))
            factors.append(DiagGaussian.point_estimate(mean))
        return TaskPosterior("classification", factors)


class OneStepGradientStrategy(_StrategyBase):
    """One explicit gradient-ascent step on the context log-likelihood.

    The adapted head is psi0 + eta * grad, with the softmax gradient written
    as forward operations (residual (onehot - probs) contracted against the
    features), so meta-training differentiates through the step exactly.
    The meta-learned initialization is shaped [feature_dim, way], which ties
    the parameter count to the training way.
    """

    kind = "one-step-gradient"

    def __init__(self, eta: float = 0.1):
        super().__init__()
        if eta < 0:
            raise ContractError(f"eta must be >= 0, got {eta}")
        self.eta = float(eta)
        self.way_dependent_parameters = True

    def add_parameters(self, store, model, way, stream):
        d = model.spec.feature_dim
        store.add("init_head.w", 0.01 * stream.normal((d, way)), ROLE_BASELINE_INIT)
        store.add("init_head.b", np.zeros(way), ROLE_BASELINE_INIT)

    def adapt(self, g, leaves, model, episode):
        if "init_head.w" not in leaves:
            raise ContractError(
                "one-step-gradient: parameter store has no init_head entries; "
                "call add_parameters at setup time"
            )
        w0, b0 = leaves["init_head.w"], leaves["init_head.b"]
        way = w0.shape[1]
        if episode.way is not None and episode.way != way:
            raise ContractError(
                f"one-step-gradient: initialization is {way}-way but episode is {episode.way}-way"
            )
        feats = model.extract_features(g, leaves, episode.context_x)
        probs = (feats @ w0 + b0).softmax(axis=1)  # [n, C]
        labels = np.asarray(episode.context_y, dtype=np.int64)
        one_hot = np.zeros((labels.size, way))
        one_hot[np.arange(labels.size), labels] = 1.0
        residual = g.tensor(one_hot) - probs
        self.counters.gradient_evaluations += 1
        d = feats.shape[1]
        factors = []
        for c in range(way):
            r_c = residual.slice(1, c, c + 1)  # [n, 1]
            grad_w = (feats * r_c).sum(axis=0)  # [d]
            grad_b = r_c.sum(axis=0)  # [1]
            w_c = w0.slice(1, c, c + 1).sum(axis=1)  # column c as [d]
            b_c = b0.slice(0, c, c + 1)  # [1]
            mean = concat([w_c, b_c], axis=0) + concat([grad_w, grad_b], axis=0) * self.eta
            factors.append(DiagGaussian.point_estimate(mean))
        return TaskPosterior("classification", factors)


def make_strategy(kind: str, eta: float = 0.1):
    if kind == "versa":
        return VersaStrategy()
    if kind == "prototypical":
        return PrototypicalStrategy()
    if kind == "one-step-gradient":
        return OneStepGradientStrategy(eta)
    if kind == "amortized-map":
        return AmortizedMapStrategy()
    raise ContractError(f"unknown strategy {kind!r}; expected one of {STRATEGY_KINDS}")
