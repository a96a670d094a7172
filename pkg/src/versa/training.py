"""Adam optimizer, episodic training loop, checkpointing, and experiment runs.

Runs are deterministic: every random draw comes from streams keyed by the run
seed plus structural tags (iteration, episode index, purpose), parameters
update in fixed name order, and metrics values do not depend on wall time.
The metrics CSV carries a ``wall_ms`` column measured with an injectable
clock; inject a constant clock to get byte-identical files across runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adaptation import STRATEGY_KINDS, make_strategy
from .distributions import GaussianPrior
from .errors import ConfigError, ContractError, DimensionError, OptimizationError
from .networks import (
    ClassifierNetworks,
    NetworkSpec,
    ParameterStore,
    ToyAmortizer,
    ViewNetworks,
)
from .objectives import amortized_vi_loss, evaluate, mlpip_loss
from .oracle import gaussian_kl, true_posterior
from .rng import RandomStream
from .tasks import (
    GLYPH_IMAGE_SIZE,
    ClusterTaskSpec,
    ToyModelSpec,
    VIEW_IMAGE_SIZE,
    sample_cluster_episode,
    sample_glyph_episode,
    sample_toy_episode,
    sample_view_episode,
)

OBJECTIVES = ("mlpip", "amortized-vi", "nonamortized-vi")
DATASETS = ("toy", "cluster", "glyph", "views")
METRICS_HEADER = "iteration,loss,val_nll,val_acc,wall_ms"

__all__ = [
    "AdamState",
    "adam_step",
    "TrainConfig",
    "TrainResult",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "build_model",
    "episode_sampler",
    "run_versatility_sweep",
    "run_toy_experiment",
    "OBJECTIVES",
    "DATASETS",
]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: ParameterStore) -> "AdamState":
        return AdamState(
            m={name: np.zeros_like(params.get(name)) for name in params},
            v={name: np.zeros_like(params.get(name)) for name in params},
        )


def adam_step(state: AdamState, params: ParameterStore, grads: dict, lr: float) -> None:
    """One bias-corrected Adam update, applied in parameter-name order."""
    state.step += 1
    t = state.step
    for name in params:
        if name not in grads:
            raise ContractError(f"adam_step: missing gradient for {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != params.get(name).shape:
            raise DimensionError(
                f"adam_step: gradient shape {g.shape} != parameter shape "
                f"{params.get(name).shape} for {name!r}"
            )
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / (1.0 - state.beta1**t)
        v_hat = state.v[name] / (1.0 - state.beta2**t)
        params.set_values(name, params.get(name) - lr * m_hat / (np.sqrt(v_hat) + state.eps))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "versa"
    objective: str = "mlpip"
    dataset: str = "cluster"
    way: int = 5
    shot: int = 5
    l_train: int = 10
    l_test: int = 10
    tasks_per_batch: int = 8
    iterations: int = 10_000
    learning_rate: float = 1e-3
    seed: int = 0
    out_dir: str = "runs/out"
    resume: str | None = None
    # dataset knobs (documented defaults; not part of the core surface)
    targets_per_class: int = 15
    toy_prior_var: float = 1.0
    toy_obs_var: float = 0.25
    cluster_input_dim: int = 8
    cluster_sigma: float = 1.0
    cluster_mean_scale: float = 1.0
    glyph_jitter: int = 1
    glyph_noise: float = 0.05
    view_obs_sigma: float = 0.1
    eta: float = 0.1
    feature_dim: int = 16
    extractor_widths: tuple = (64, 64)
    amort_post_widths: tuple = (64, 64)
    amort_pre_widths: tuple = (64,)
    latent_dim: int = 8
    generator_widths: tuple = (64, 64)
    validation_episodes: int = 100
    validate_every: int = 50

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective {self.objective!r} not in {OBJECTIVES}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset {self.dataset!r} not in {DATASETS}")
        if self.strategy not in STRATEGY_KINDS:
            raise ConfigError(f"strategy {self.strategy!r} not in {STRATEGY_KINDS}")
        positive = {
            "way": self.way,
            "shot": self.shot,
            "l_train": self.l_train,
            "l_test": self.l_test,
            "tasks_per_batch": self.tasks_per_batch,
            "learning_rate": self.learning_rate,
            "targets_per_class": self.targets_per_class,
        }
        for key, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{key} must be positive, got {value}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")

    @staticmethod
    def from_json(path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in TrainConfig.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("extractor_widths", "amort_post_widths", "amort_pre_widths", "generator_widths"):
            if key in raw:
                raw[key] = tuple(raw[key])
        config = TrainConfig(**raw)
        config.validate()
        return config

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            out[name] = list(value) if isinstance(value, tuple) else value
        return out


@dataclass
class TrainResult:
    checkpoint_path: str
    best_checkpoint_path: str | None
    metrics_path: str
    final_loss: float | None
    best_val_nll: float | None


# ---------------------------------------------------------------------------
# Model and episode plumbing
# ---------------------------------------------------------------------------


def _network_spec(config: TrainConfig) -> NetworkSpec:
    if config.dataset == "glyph":
        input_dim = GLYPH_IMAGE_SIZE * GLYPH_IMAGE_SIZE
    elif config.dataset == "cluster":
        input_dim = config.cluster_input_dim
    else:
        input_dim = VIEW_IMAGE_SIZE * VIEW_IMAGE_SIZE
    return NetworkSpec(
        input_dim=input_dim,
        feature_dim=config.feature_dim,
        extractor_widths=tuple(config.extractor_widths),
        amort_pre_widths=tuple(config.amort_pre_widths),
        amort_post_widths=tuple(config.amort_post_widths),
        latent_dim=config.latent_dim,
        generator_widths=tuple(config.generator_widths),
        output_dim=VIEW_IMAGE_SIZE * VIEW_IMAGE_SIZE,
    )


def build_model(config: TrainConfig):
    if config.dataset == "toy":
        return ToyAmortizer(
            ToyModelSpec(
                prior_var=config.toy_prior_var,
                obs_var=config.toy_obs_var,
                n_context=config.shot,
                n_target=config.targets_per_class,
            )
        )
    if config.dataset == "views":
        return ViewNetworks(_network_spec(config), obs_sigma=config.view_obs_sigma)
    return ClassifierNetworks(_network_spec(config))


def episode_sampler(config: TrainConfig, way: int | None = None, shot: int | None = None):
    """A pure (stream, task_id) -> Episode function for the configured dataset."""
    way = config.way if way is None else way
    shot = config.shot if shot is None else shot
    if config.dataset == "toy":
        spec = ToyModelSpec(
            prior_var=config.toy_prior_var,
            obs_var=config.toy_obs_var,
            n_context=shot,
            n_target=config.targets_per_class,
        )
        return lambda stream, task_id: sample_toy_episode(spec, stream, task_id)[0]
    if config.dataset == "cluster":
        spec = ClusterTaskSpec(
            input_dim=config.cluster_input_dim,
            way=way,
            shot=shot,
            targets_per_class=config.targets_per_class,
            cluster_sigma=config.cluster_sigma,
            mean_scale=config.cluster_mean_scale,
        )
        return lambda stream, task_id: sample_cluster_episode(spec, stream, task_id)
    if config.dataset == "glyph":
        return lambda stream, task_id: sample_glyph_episode(
            way,
            shot,
            stream,
            targets_per_class=config.targets_per_class,
            jitter=config.glyph_jitter,
            noise=config.glyph_noise,
            task_id=task_id,
        )
    return lambda stream, task_id: sample_view_episode(shot, stream, task_id)


def _make_strategy(config: TrainConfig):
    if config.dataset in ("toy", "views"):
        return None  # adaptation strategies apply to the classification pathway
    return make_strategy(config.strategy, eta=config.eta)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path, config: TrainConfig, params: ParameterStore) -> None:
    """Single JSON document {spec, params}; values as decimal arrays.

    Python float repr round-trips binary64 exactly, so loading restores the
    training state bit-for-bit on the same platform.
    """
    spec = {"config": config.to_dict()}
    if config.dataset != "toy":
        spec["network"] = _network_spec(config).to_dict()
    doc = {
        "spec": spec,
        "params": {
            name: {
                "shape": list(params.get(name).shape),
                "values": [float(v) for v in params.get(name).reshape(-1)],
            }
            for name in params
        },
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Returns (config, model, params, strategy) rebuilt from a checkpoint."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    raw = doc["spec"]["config"]
    for key in ("extractor_widths", "amort_post_widths", "amort_pre_widths", "generator_widths"):
        raw[key] = tuple(raw[key])
    config = TrainConfig(**raw)
    config.validate()
    model = build_model(config)
    params = _init_params(config, model)
    stored = doc["params"]
    if set(stored) != set(params.names()):
        raise ConfigError(
            f"checkpoint parameters {sorted(stored)} do not match model "
            f"parameters {sorted(params.names())}"
        )
    for name, entry in stored.items():
        params.set_values(name, np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"]))
    strategy = _make_strategy(config)
    return config, model, params, strategy


def _init_params(config: TrainConfig, model) -> ParameterStore:
    params = model.init_params(RandomStream(config.seed, "init"))
    strategy = _make_strategy(config)
    if strategy is not None:
        strategy.add_parameters(params, model, config.way, RandomStream(config.seed, "init-head"))
    return params


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _format_value(value) -> str:
    if value is None:
        return "nan"
    return repr(float(value))


def train(config: TrainConfig, clock=None) -> TrainResult:
    """Episodic training: sample a task batch, score it, backpropagate, Adam.

    Writes ``metrics.csv`` (one row per ``validate_every`` iterations and at
    the final iteration), ``final.json`` at the end, and ``best.json`` at the
    lowest validation NLL (validation = ``validation_episodes`` held-out
    seeded episodes).  A NaN loss aborts with the iteration index and the
    offending config echoed.
    """
    config.validate()
    if config.objective == "nonamortized-vi":
        raise ConfigError(
            "nonamortized-vi optimizes per-task posteriors at evaluation time with "
            "shared parameters frozen; train with mlpip or amortized-vi, then "
            "evaluate the checkpoint with per-task fits"
        )
    clock = clock if clock is not None else time.perf_counter
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(config)
    if config.resume:
        resumed_config, _, params, strategy = load_checkpoint(config.resume)
        if resumed_config.dataset != config.dataset:
            raise ConfigError(
                f"resume dataset {resumed_config.dataset!r} != config dataset {config.dataset!r}"
            )
    else:
        params = _init_params(config, model)
        strategy = _make_strategy(config)
    sampler = episode_sampler(config)
    run_stream = RandomStream(config.seed, "train")
    val_episodes = [
        sampler(RandomStream(config.seed, "val", i), task_id=i)
        for i in range(config.validation_episodes)
    ]
    prior = GaussianPrior(0.0, 1.0)
    adam = AdamState.for_params(params)
    metrics_path = out_dir / "metrics.csv"
    best_path = out_dir / "best.json"
    final_path = out_dir / "final.json"
    best_val_nll = None
    final_loss = None
    wrote_best = False
    start = clock()
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        metrics.write(METRICS_HEADER + "\n")
        for it in range(config.iterations):
            batch = [
                sampler(run_stream.split("task", it, j), task_id=it * config.tasks_per_batch + j)
                for j in range(config.tasks_per_batch)
            ]
            obj_stream = run_stream.split("objective", it)
            try:
                if config.objective == "amortized-vi":
                    report = amortized_vi_loss(
                        model, params, batch, config.l_train, prior, obj_stream
                    )
                else:
                    report = mlpip_loss(
                        model, params, batch, config.l_train, obj_stream, strategy=strategy
                    )
            except OptimizationError as err:
                raise OptimizationError(
                    f"loss diverged at iteration {it}: {err}; config={config.to_dict()}"
                ) from err
            if not np.isfinite(report.loss):
                raise OptimizationError(
                    f"loss diverged at iteration {it}; config={config.to_dict()}"
                )
            final_loss = report.loss
            adam_step(adam, params, report.gradients, config.learning_rate)
            done = it + 1
            if done % config.validate_every == 0 or done == config.iterations:
                val = evaluate(
                    model,
                    params,
                    val_episodes,
                    config.l_test,
                    RandomStream(config.seed, "val-eval", done),
                    adapt=strategy.adapt if strategy is not None else None,
                )
                row = ",".join(
                    [
                        str(done),
                        _format_value(report.loss),
                        _format_value(val["nll_mean"]),
                        _format_value(val.get("accuracy_mean")),
                        _format_value((clock() - start) * 1000.0),
                    ]
                )
                metrics.write(row + "\n")
                if best_val_nll is None or val["nll_mean"] < best_val_nll:
                    best_val_nll = val["nll_mean"]
                    save_checkpoint(best_path, config, params)
                    wrote_best = True
    save_checkpoint(final_path, config, params)
    return TrainResult(
        checkpoint_path=str(final_path),
        best_checkpoint_path=str(best_path) if wrote_best else None,
        metrics_path=str(metrics_path),
        final_loss=final_loss,
        best_val_nll=best_val_nll,
    )


# ---------------------------------------------------------------------------
# Versatility sweep
# ---------------------------------------------------------------------------


def run_versatility_sweep(
    checkpoint_path,
    ways,
    shots,
    episodes_per_cell: int = 200,
    seed: int = 1234,
) -> list[dict]:
    """Evaluate one trained model across (way, shot) cells with no retraining.

    Requires a strategy whose parameter count is way-independent; performs
    zero optimizer steps (instrumented via the strategy counters).
    """
    config, model, params, strategy = load_checkpoint(checkpoint_path)
    if strategy is None:
        raise ContractError("versatility sweep applies to classification checkpoints")
    if strategy.way_dependent_parameters:
        raise ContractError(
            f"strategy {strategy.kind!r} has way-dependent parameters; "
            "the sweep requires a way-independent strategy"
        )
    rows = []
    for way in ways:
        for shot in shots:
            sampler = episode_sampler(config, way=way, shot=shot)
            episodes = [
                sampler(RandomStream(seed, "sweep", way, shot, i), task_id=i)
                for i in range(episodes_per_cell)
            ]
            strategy.reset_counters()
            before = strategy.counters.snapshot()
            metrics = evaluate(
                model,
                params,
                episodes,
                config.l_test,
                RandomStream(seed, "sweep-eval", way, shot),
                adapt=strategy.adapt,
            )
            steps_after, _ = strategy.counters.snapshot()
            rows.append(
                {
                    "way": way,
                    "shot": shot,
                    "accuracy": metrics["accuracy_mean"],
                    "nll": metrics["nll_mean"],
                    "optimizer_steps": steps_after - before[0],
                    "amortization_parameter_count": params.count("amortization"),
                }
            )
    return rows


# ---------------------------------------------------------------------------
# Toy posterior-recovery experiment
# ---------------------------------------------------------------------------


@dataclass
class ToyExperimentResult:
    mean_kl: float
    per_task_kl: list
    params: dict
    csv_path: str | None
    train_loss_first_quartile: float = 0.0
    train_loss_last_quartile: float = 0.0
    losses: list = field(default_factory=list)


def toy_posterior_params(params: ParameterStore, observations) -> tuple[float, float]:
    """(mean, variance) of the amortized posterior for one task's context."""
    total = float(np.sum(observations))
    mean = float(params.get("toy.w_mu")[0] * total + params.get("toy.b_mu")[0])
    var = float(np.exp(params.get("toy.w_sigma")[0] * total + params.get("toy.b_sigma")[0]))
    return mean, var


def toy_batch_step(model: ToyAmortizer, params: ParameterStore, episodes, n_samples: int,
                   stream: RandomStream):
    """One vectorized predictive-objective evaluation over a toy batch.

    Exactly the per-episode objective (same posterior, same noise keyed by
    task id, same pairwise reduction trees) computed on one graph with the
    batch stacked along an axis; returns (loss, gradients).  Keeping the toy
    training loop on this path makes the 250-task protocol run in seconds.
    """
    from .autodiff import Graph

    spec = model.spec
    batch = len(episodes)
    g = Graph()
    leaves = params.leaves(g)
    totals = np.array(
        [[float(np.sum(ep.context_y))] for ep in episodes]
    )  # [B, 1]
    targets = np.stack([ep.target_y.reshape(-1) for ep in episodes])  # [B, M]
    eps = np.stack(
        [stream.split("episode", ep.task_id).normal((n_samples, 1)) for ep in episodes],
        axis=1,
    )  # [L, B, 1]
    mean = leaves["toy.w_mu"] * g.tensor(totals) + leaves["toy.b_mu"]  # [B, 1]
    log_var = leaves["toy.w_sigma"] * g.tensor(totals) + leaves["toy.b_sigma"]
    psi = mean + (log_var * 0.5).exp() * g.tensor(eps)  # [L, B, 1]
    norm = -0.5 * float(np.log(2.0 * np.pi * spec.obs_var))
    ll = (g.tensor(targets) - psi).square() * (-0.5 / spec.obs_var) + norm  # [L, B, M]
    log_pred = ll.logsumexp(axis=0) - float(np.log(n_samples))  # [B, M]
    loss = -(log_pred.mean(axis=1).mean(axis=0))
    grads_all = g.backward(loss)
    gradients = {name: grads_all[leaves[name].node_id] for name in params}
    return float(loss.values), gradients


def run_toy_experiment(
    config: TrainConfig,
    n_train_tasks: int = 250,
    n_test_tasks: int = 100,
    csv_path=None,
) -> ToyExperimentResult:
    """Train the linear amortization on a fixed pool of scalar tasks, then
    measure KL(true posterior || q) on fresh tasks and dump posterior pairs.

    Mirrors the protocol: a finite pool of training tasks, mini-batches drawn
    from the pool, fresh tasks for evaluation against the closed-form
    posterior.
    """
    config.validate()
    if config.dataset != "toy":
        raise ConfigError("run_toy_experiment requires dataset='toy'")
    spec = ToyModelSpec(
        prior_var=config.toy_prior_var,
        obs_var=config.toy_obs_var,
        n_context=config.shot,
        n_target=config.targets_per_class,
    )
    model = ToyAmortizer(spec)
    params = model.init_params()
    pool = [
        sample_toy_episode(spec, RandomStream(config.seed, "toy-pool", i), task_id=i)[0]
        for i in range(n_train_tasks)
    ]
    adam = AdamState.for_params(params)
    run_stream = RandomStream(config.seed, "toy-train")
    losses = []
    for it in range(config.iterations):
        picks = run_stream.split("batch", it).integers(0, n_train_tasks, (config.tasks_per_batch,))
        batch = [pool[int(p)] for p in picks]
        loss, gradients = toy_batch_step(
            model, params, batch, config.l_train, run_stream.split("objective", it)
        )
        losses.append(loss)
        adam_step(adam, params, gradients, config.learning_rate)
    per_task_kl = []
    rows = []
    for i in range(n_test_tasks):
        episode, _ = sample_toy_episode(spec, RandomStream(config.seed, "toy-test", i), task_id=i)
        observations = episode.context_y.reshape(-1)
        truth = true_posterior(spec.prior_var, spec.obs_var, observations)
        q_mean, q_var = toy_posterior_params(params, observations)
        kl = gaussian_kl(truth.mean, truth.variance, q_mean, q_var)
        per_task_kl.append(kl)
        rows.append((i, truth.mean, truth.variance, q_mean, q_var, observations))
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("task_id,true_mean,true_var,q_mean,q_var,observations\n")
            for task_id, tm, tv, qm, qv, obs in rows:
                obs_txt = "|".join(repr(float(v)) for v in obs)
                fh.write(f"{task_id},{tm!r},{tv!r},{qm!r},{qv!r},{obs_txt}\n")
    quarter = max(1, len(losses) // 4)
    return ToyExperimentResult(
        mean_kl=float(np.mean(per_task_kl)) if per_task_kl else float("nan"),
        per_task_kl=per_task_kl,
        params={name: params.get(name).copy() for name in params},
        csv_path=str(csv_path) if csv_path is not None else None,
        train_loss_first_quartile=float(np.mean(losses[:quarter])) if losses else float("nan"),
        train_loss_last_quartile=float(np.mean(losses[-quarter:])) if losses else float("nan"),
        losses=losses,
    )
