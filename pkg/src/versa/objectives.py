"""Training objectives and evaluation metrics.

Two training objectives share the episode plumbing but differ in substance:

* ``mlpip_loss`` scores held-out targets with a log-mean-exp over posterior
  samples: -(1/(M T)) sum_t sum_m log[(1/L) sum_l p(y_m | x_m, psi_l)].  The
  inner average is over probabilities, not log-probabilities; getting this
  wrong silently turns the objective into the VI likelihood term, so the
  formula is pinned against a quadrature oracle in the tests.
* ``amortized_vi_loss`` is the Monte-Carlo free energy: a mean-of-logs
  likelihood term over *all* of a task's data (no context/target split) minus
  nothing, plus a KL penalty to a fixed prior.

Per-episode randomness is keyed by task id, and cross-episode reductions run
in task-id order, so batch results are bitwise invariant to episode order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .autodiff import Graph
from .distributions import DiagGaussian, GaussianPrior, kl_divergence
from .errors import ContractError, OptimizationError
from .networks import ParameterStore, TaskPosterior
from .rng import RandomStream
from .tasks import Episode, validate_episode

__all__ = [
    "ObjectiveReport",
    "mlpip_loss",
    "amortized_vi_loss",
    "nonamortized_vi_fit",
    "FittedPosterior",
    "evaluate",
    "student_t_half_width",
]


@dataclass
class ObjectiveReport:
    """Loss value, per-episode metrics, and gradients grouped by role."""

    loss: float
    per_episode_nll: list
    per_episode_accuracy: list
    grad_norms: dict
    gradients: dict | None = None


def _pairwise_mean(values: list[float]) -> float:
    arr = np.asarray(values, dtype=np.float64)
    total = arr
    while total.shape[0] > 1:
        n = total.shape[0]
        if n % 2:
            total = np.concatenate([total[0 : n - 1 : 2] + total[1:n:2], total[n - 1 :]])
        else:
            total = total[0::2] + total[1::2]
    return float(total[0] / arr.size)


def _episode_stream(stream: RandomStream, episode: Episode) -> RandomStream:
    return stream.split("episode", episode.task_id)


def _grad_norms_by_role(params: ParameterStore, grads: dict) -> dict:
    sums: dict[str, float] = {}
    for name in params:
        role = params.role(name)
        sums[role] = sums.get(role, 0.0) + float(np.sum(grads[name] ** 2))
    return {role: float(np.sqrt(v)) for role, v in sums.items()}


def _accumulate_episode_grads(model, params, episodes, stream, build_scalar):
    """Shared loop: per-episode graphs, canonical (task-id sorted) reduction.

    ``build_scalar(g, leaves, episode, ep_stream)`` returns
    (scalar loss tensor, nll value, accuracy value or None).
    """
    order = sorted(range(len(episodes)), key=lambda i: (episodes[i].task_id, i))
    nlls = [None] * len(episodes)
    accs = [None] * len(episodes)
    losses_sorted = []
    grad_sum: dict[str, np.ndarray] | None = None
    for i in order:
        episode = episodes[i]
        g = Graph()
        leaves = params.leaves(g)
        scalar, nll, acc = build_scalar(g, leaves, episode, _episode_stream(stream, episode))
        losses_sorted.append(float(scalar.values))
        nlls[i] = nll
        accs[i] = acc
        grads = g.backward(scalar)
        if grad_sum is None:
            grad_sum = {name: grads[leaves[name].node_id].copy() for name in params}
        else:
            for name in params:
                grad_sum[name] += grads[leaves[name].node_id]
    count = len(episodes)
    gradients = {name: arr / count for name, arr in grad_sum.items()}
    loss = _pairwise_mean(losses_sorted)
    if not np.isfinite(loss):
        raise OptimizationError("objective produced a non-finite loss")
    return loss, nlls, accs, gradients


def mlpip_loss(
    model,
    params: ParameterStore,
    episodes: list[Episode],
    n_samples: int,
    stream: RandomStream,
    strategy=None,
) -> ObjectiveReport:
    """Monte-Carlo predictive objective over a batch of episodes.

    The posterior is built from each episode's context set only and scored on
    the disjoint target set; sampling is pathwise (reparameterized), so the
    returned gradients flow into both the shared and amortization parameters.
    """
    if n_samples < 1:
        raise ContractError(f"mlpip_loss: n_samples must be >= 1, got {n_samples}")
    if not episodes:
        raise ContractError("mlpip_loss: empty episode batch")
    for ep in episodes:
        validate_episode(ep)

    def build(g, leaves, episode, ep_stream):
        if strategy is not None:
            posterior = strategy.adapt(g, leaves, model, episode)
        else:
            posterior = model.build_task_posterior(g, leaves, episode)
        liks = model.episode_log_liks(
            g, leaves, posterior, episode.target_x, episode.target_y, n_samples, ep_stream
        )
        nll = -liks.log_predictive().mean(axis=0)
        acc = None
        if liks.predicted_labels is not None:
            acc = float(np.mean(liks.predicted_labels == episode.target_y))
        return nll, float(nll.values), acc

    loss, nlls, accs, gradients = _accumulate_episode_grads(
        model, params, episodes, stream, build
    )
    return ObjectiveReport(
        loss=loss,
        per_episode_nll=nlls,
        per_episode_accuracy=[a for a in accs if a is not None],
        grad_norms=_grad_norms_by_role(params, gradients),
        gradients=gradients,
    )


def amortized_vi_loss(
    model,
    params: ParameterStore,
    episodes: list[Episode],
    n_samples: int,
    prior: GaussianPrior,
    stream: RandomStream,
) -> ObjectiveReport:
    """Monte-Carlo free energy, averaged over tasks.

    Per task: -sum over all task points of (1/L) sum_l log p(y | x, psi_l)
    plus KL(q || prior).  The posterior is conditioned on all task data and
    the likelihood runs over all task data: this objective draws no
    context/target distinction inside a task.  ``per_episode_nll`` reports the
    per-point mean-of-logs likelihood term (training telemetry, not the
    predictive NLL).
    """
    if n_samples < 1:
        raise ContractError(f"amortized_vi_loss: n_samples must be >= 1, got {n_samples}")
    if not episodes:
        raise ContractError("amortized_vi_loss: empty episode batch")
    for ep in episodes:
        validate_episode(ep)

    def build(g, leaves, episode, ep_stream):
        posterior = model.build_task_posterior(g, leaves, episode, include_targets=True)
        all_x = np.concatenate([episode.context_x, episode.target_x])
        all_y = np.concatenate([episode.context_y, episode.target_y])
        liks = model.episode_log_liks(g, leaves, posterior, all_x, all_y, n_samples, ep_stream)
        mean_log_lik = liks.samples.mean(axis=liks.sample_axis)  # [points]
        total_log_lik = mean_log_lik.sum()
        kl_total = None
        for factor in posterior.factors:
            prior_factor = prior.as_gaussian(g, factor.dim)
            term = kl_divergence(factor, prior_factor)
            kl_total = term if kl_total is None else kl_total + term
        free_energy = -total_log_lik + kl_total
        n_points = all_y.shape[0]
        per_point_nll = -float(total_log_lik.values) / n_points
        acc = None
        if liks.predicted_labels is not None:
            acc = float(np.mean(liks.predicted_labels == all_y))
        return free_energy, per_point_nll, acc

    loss, nlls, accs, gradients = _accumulate_episode_grads(
        model, params, episodes, stream, build
    )
    return ObjectiveReport(
        loss=loss,
        per_episode_nll=nlls,
        per_episode_accuracy=[a for a in accs if a is not None],
        grad_norms=_grad_norms_by_role(params, gradients),
        gradients=gradients,
    )


# ---------------------------------------------------------------------------
# Non-amortized (per-task) variational inference
# ---------------------------------------------------------------------------


@dataclass
class FittedPosterior:
    """Graph-independent per-task Gaussian factors from a free-form VI fit."""

    kind: str
    means: list
    log_vars: list
    final_elbo: float = 0.0
    steps: int = 0

    def as_task_posterior(self, g: Graph) -> TaskPosterior:
        factors = [
            DiagGaussian.constant(g, m, lv) for m, lv in zip(self.means, self.log_vars)
        ]
        return TaskPosterior(self.kind, factors)


def nonamortized_vi_fit(
    model,
    params: ParameterStore,
    episode: Episode,
    prior: GaussianPrior,
    steps: int,
    step_size: float,
    n_samples: int,
    stream: RandomStream,
) -> tuple[FittedPosterior, ObjectiveReport]:
    """Fit a free-form diagonal Gaussian per task by maximizing the ELBO.

    Shared parameters stay frozen; only the local factor means/log-variances
    move (Adam, bias-corrected, fixed update order).  Factors start at mean 0
    and log-variance -2.  When the model provides a closed-form expected
    log-likelihood (the scalar Gaussian family does) it is used instead of
    Monte-Carlo sampling: same ELBO, zero estimator variance.
    """
    from .training import AdamState, adam_step  # local import to avoid a cycle

    if steps < 1:
        raise ContractError(f"nonamortized_vi_fit: steps must be >= 1, got {steps}")
    if n_samples < 1:
        raise ContractError(f"nonamortized_vi_fit: n_samples must be >= 1, got {n_samples}")
    validate_episode(episode)
    dims = model.posterior_factor_dims(episode)
    kind = "classification" if episode.kind == "classification" else "latent"
    local = ParameterStore()
    for f, dim in enumerate(dims):
        local.add(f"factor{f}.mean", np.zeros(dim), "local")
        local.add(f"factor{f}.log_var", np.full(dim, -2.0), "local")
    adam = AdamState.for_params(local)
    all_x = np.concatenate([episode.context_x, episode.target_x])
    all_y = np.concatenate([episode.context_y, episode.target_y])
    closed_form = getattr(model, "expected_log_lik", None)
    last_elbo = None
    for step in range(steps):
        g = Graph()
        leaves = params.leaves(g)  # frozen: gradients are never read for these
        local_leaves = local.leaves(g)
        factors = [
            DiagGaussian(local_leaves[f"factor{f}.mean"], local_leaves[f"factor{f}.log_var"])
            for f in range(len(dims))
        ]
        posterior = TaskPosterior(kind, factors)
        if closed_form is not None and len(factors) == 1:
            log_lik = closed_form(g, leaves, factors[0], all_x, all_y)
        else:
            liks = model.episode_log_liks(
                g, leaves, posterior, all_x, all_y, n_samples, stream.split("fit", step)
            )
            log_lik = liks.samples.mean(axis=liks.sample_axis).sum()
        kl_total = None
        for factor in factors:
            term = kl_divergence(factor, prior.as_gaussian(g, factor.dim))
            kl_total = term if kl_total is None else kl_total + term
        negative_elbo = -(log_lik - kl_total)
        value = float(negative_elbo.values)
        if not np.isfinite(value):
            raise OptimizationError(f"nonamortized_vi_fit diverged at step {step}")
        last_elbo = -value
        all_grads = g.backward(negative_elbo)
        grads = {name: all_grads[local_leaves[name].node_id] for name in local}
        adam_step(adam, local, grads, step_size)
    fitted = FittedPosterior(
        kind=kind,
        means=[local.get(f"factor{f}.mean").copy() for f in range(len(dims))],
        log_vars=[local.get(f"factor{f}.log_var").copy() for f in range(len(dims))],
        final_elbo=last_elbo,
        steps=steps,
    )
    report = ObjectiveReport(
        loss=-last_elbo,
        per_episode_nll=[-last_elbo / all_y.shape[0]],
        per_episode_accuracy=[],
        grad_norms={},
        gradients=None,
    )
    return fitted, report


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def student_t_half_width(values, confidence: float = 0.95):
    """Half-width of the Student-t confidence interval over task metrics."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return None
    quantile = stats.t.ppf(0.5 + confidence / 2.0, df=arr.size - 1)
    return float(quantile * arr.std(ddof=1) / np.sqrt(arr.size))


def _evaluate_one(model, params, episode, n_samples, ep_stream, adapt):
    g = Graph()
    leaves = params.leaves(g)
    if adapt is not None:
        posterior = adapt(g, leaves, model, episode)
    else:
        posterior = model.build_task_posterior(g, leaves, episode)
    out = {}
    if episode.kind == "classification":
        log_probs = model.predict(
            g, leaves, posterior, episode.target_x, n_samples, ep_stream
        ).values
        labels = np.asarray(episode.target_y, dtype=np.int64)
        out["nll"] = float(-np.mean(log_probs[np.arange(labels.size), labels]))
        out["accuracy"] = float(np.mean(np.argmax(log_probs, axis=1) == labels))
    else:
        liks = model.episode_log_liks(
            g, leaves, posterior, episode.target_x, episode.target_y, n_samples, ep_stream
        )
        out["nll"] = float(-liks.log_predictive().mean(axis=0).values)
        if hasattr(model, "reconstruct"):
            recon = model.reconstruct(g, leaves, posterior, episode.target_x)
            out["mse"] = float(np.mean((recon - episode.target_y) ** 2))
            baseline = episode.context_y.mean(axis=0)
            out["baseline_mse"] = float(np.mean((baseline - episode.target_y) ** 2))
    return out


def evaluate(
    model,
    params: ParameterStore,
    episodes: list[Episode],
    n_samples: int,
    stream: RandomStream,
    adapt=None,
    workers: int = 1,
) -> dict:
    """Per-episode NLL/accuracy (and MSE for view tasks) with t-intervals.

    ``adapt`` is an optional callable (g, leaves, model, episode) ->
    TaskPosterior -- adaptation strategies and per-task VI fits plug in here.
    With a single episode the interval is reported as None.  ``workers`` > 1
    evaluates episodes on threads; results reduce in episode-index order, so
    the output is identical to the serial run.
    """
    if n_samples < 1:
        raise ContractError(f"evaluate: n_samples must be >= 1, got {n_samples}")
    if not episodes:
        raise ContractError("evaluate: empty episode list")
    for ep in episodes:
        validate_episode(ep)

    def run(i):
        return _evaluate_one(
            model, params, episodes[i], n_samples, _episode_stream(stream, episodes[i]), adapt
        )

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(episodes))))
    else:
        results = [run(i) for i in range(len(episodes))]

    metrics = {
        "episodes": len(episodes),
        "per_episode_nll": [r["nll"] for r in results],
        "nll_mean": _pairwise_mean([r["nll"] for r in results]),
        "nll_half_width": student_t_half_width([r["nll"] for r in results]),
    }
    if "accuracy" in results[0]:
        accs = [r["accuracy"] for r in results]
        metrics["per_episode_accuracy"] = accs
        metrics["accuracy_mean"] = _pairwise_mean(accs)
        metrics["accuracy_half_width"] = student_t_half_width(accs)
    if "mse" in results[0]:
        metrics["per_episode_mse"] = [r["mse"] for r in results]
        metrics["mse_mean"] = _pairwise_mean([r["mse"] for r in results])
        metrics["per_episode_baseline_mse"] = [r["baseline_mse"] for r in results]
        metrics["baseline_mse_mean"] = _pairwise_mean([r["baseline_mse"] for r in results])
    return metrics
