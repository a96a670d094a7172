"""Feature extractor, set-input amortization networks, and predictive heads.

Three model families share the same plumbing:

* :class:`ClassifierNetworks` -- a shared MLP feature extractor feeding a
  task-specific linear softmax classifier whose per-class weight posteriors
  are produced by a permutation-invariant amortization network (one forward
  pass per class present in the episode).
* :class:`ToyAmortizer` -- the four-scalar linear amortization for the scalar
  Gaussian task family (mean linear in sum(y), log-variance linear in sum(y)).
* :class:`ViewNetworks` -- a per-view encoder pooled into a latent posterior,
  plus a shared generator that decodes (latent, azimuth) into sigmoid pixel
  means under a fixed-scale Gaussian pixel likelihood.

Set pooling sorts elements into a canonical (lexicographic) order and reduces
them with an adjacent-pair tree, which makes pooled outputs bitwise invariant
to input permutations and exact under element duplication.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor, concat
from .distributions import (
    DiagGaussian,
    local_reparam_logit_samples,
    sample_many,
)
from .errors import ContractError, DimensionError
from .rng import RandomStream
from .tasks import Episode, ToyModelSpec

ROLE_SHARED = "shared"
ROLE_AMORTIZATION = "amortization"
ROLE_BASELINE_INIT = "baseline-init"

__all__ = [
    "ROLE_SHARED",
    "ROLE_AMORTIZATION",
    "ROLE_BASELINE_INIT",
    "ParameterStore",
    "NetworkSpec",
    "TaskPosterior",
    "EpisodeLogLiks",
    "ClassifierNetworks",
    "ToyAmortizer",
    "ViewNetworks",
    "canonical_row_order",
    "pooled_row_mean",
]


class ParameterStore:
    """Named, shaped float64 parameter arrays with a role tag per entry.

    Names are unique and shapes are fixed after construction; iteration order
    is insertion order and is the canonical order for optimizer updates.
    """

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self._roles: dict[str, str] = {}

    def add(self, name: str, values, role: str) -> None:
        if name in self._arrays:
            raise ContractError(f"parameter {name!r} already exists")
        self._arrays[name] = np.array(values, dtype=np.float64)
        self._roles[name] = role

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def get(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def role(self, name: str) -> str:
        return self._roles[name]

    def set_values(self, name: str, values: np.ndarray) -> None:
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != self._arrays[name].shape:
            raise DimensionError(
                f"parameter {name!r}: shape {arr.shape} != fixed shape {self._arrays[name].shape}"
            )
        self._arrays[name] = arr.copy()

    def leaves(self, graph: Graph) -> dict[str, Tensor]:
        """Record every parameter as a leaf tensor on ``graph``, in order."""
        return {name: graph.tensor(arr) for name, arr in self._arrays.items()}

    def count(self, role: str | None = None) -> int:
        return sum(
            arr.size
            for name, arr in self._arrays.items()
            if role is None or self._roles[name] == role
        )

    def clone(self) -> "ParameterStore":
        out = ParameterStore()
        for name, arr in self._arrays.items():
            out.add(name, arr.copy(), self._roles[name])
        return out


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths and dimensions; parameter counts depend only on this."""

    input_dim: int
    feature_dim: int = 16
    extractor_widths: tuple = (64, 64)
    nonlinearity: str = "elu"
    amort_pre_widths: tuple = (64,)
    amort_post_widths: tuple = (64, 64)
    latent_dim: int = 8
    generator_widths: tuple = (64, 64)
    output_dim: int = 256
    logvar_min: float = -12.0
    logvar_max: float = 6.0

    def __post_init__(self):
        widths = (
            (self.input_dim, self.feature_dim, self.latent_dim, self.output_dim)
            + tuple(self.extractor_widths)
            + tuple(self.amort_pre_widths)
            + tuple(self.amort_post_widths)
            + tuple(self.generator_widths)
        )
        if any(int(w) <= 0 for w in widths):
            raise ContractError(f"NetworkSpec: all widths must be positive, got {widths}")
        if self.nonlinearity not in ("elu", "relu"):
            raise ContractError(f"NetworkSpec: unknown nonlinearity {self.nonlinearity!r}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "feature_dim": self.feature_dim,
            "extractor_widths": list(self.extractor_widths),
            "nonlinearity": self.nonlinearity,
            "amort_pre_widths": list(self.amort_pre_widths),
            "amort_post_widths": list(self.amort_post_widths),
            "latent_dim": self.latent_dim,
            "generator_widths": list(self.generator_widths),
            "output_dim": self.output_dim,
            "logvar_min": self.logvar_min,
            "logvar_max": self.logvar_max,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        d = dict(d)
        for key in ("extractor_widths", "amort_pre_widths", "amort_post_widths", "generator_widths"):
            d[key] = tuple(d[key])
        return NetworkSpec(**d)


@dataclass
class TaskPosterior:
    """Per-class weight posteriors (classification) or one latent posterior."""

    kind: str  # "classification" | "latent"
    factors: list

    @property
    def class_count(self) -> int:
        return len(self.factors)

    def as_point_estimate(self) -> "TaskPosterior":
        return TaskPosterior(self.kind, [DiagGaussian.point_estimate(f.mean) for f in self.factors])


@dataclass
class EpisodeLogLiks:
    """Per-sample target log-likelihoods plus metric-only side information."""

    samples: Tensor  # log p(y_m | psi_l): sample axis given by sample_axis
    sample_axis: int
    predicted_labels: np.ndarray | None = None  # classification only

    def log_predictive(self) -> Tensor:
        """log [ (1/L) sum_l p(y_m | psi_l) ], stabilized, shape [M]."""
        n = self.samples.shape[self.sample_axis]
        return self.samples.logsumexp(axis=self.sample_axis) - float(np.log(n))


# ---------------------------------------------------------------------------
# Shared building blocks
# ---------------------------------------------------------------------------


def canonical_row_order(values: np.ndarray) -> np.ndarray:
    """Lexicographic order of matrix rows: the canonical pooling order."""
    return np.lexsort(values.T[::-1]) if values.shape[0] > 1 else np.arange(values.shape[0])


def _tree_sum(tensors: list) -> Tensor:
    """Adjacent-pair tree sum of same-shape tensors (fixed evaluation order)."""
    while len(tensors) > 1:
        nxt = [tensors[i] + tensors[i + 1] for i in range(0, len(tensors) - 1, 2)]
        if len(tensors) % 2:
            nxt.append(tensors[-1])
        tensors = nxt
    return tensors[0]


def pooled_row_mean(t: Tensor, order: np.ndarray) -> Tensor:
    """Mean over the rows of ``t`` summed in the given canonical order; [1, d]."""
    rows = [t.slice(0, int(i), int(i) + 1) for i in order]
    return _tree_sum(rows) * (1.0 / len(rows))


def _squeeze_row(t: Tensor) -> Tensor:
    """[1, d] -> [d] without arithmetic (sum over the unit axis is exact)."""
    return t.sum(axis=0)


def _clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clamp to [lo, hi] built from relu (max then min)."""
    lower = (t - lo).relu() + lo
    return -((-(lower - hi)).relu()) + hi


def _glorot(stream: RandomStream, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return limit * (2.0 * stream.uniform((fan_in, fan_out)) - 1.0)


def _add_chain(store: ParameterStore, prefix: str, dims: list, role: str, stream: RandomStream):
    for i in range(len(dims) - 1):
        store.add(f"{prefix}.w{i}", _glorot(stream, dims[i], dims[i + 1]), role)
        store.add(f"{prefix}.b{i}", np.zeros(dims[i + 1]), role)


def _add_head(store, prefix, fan_in, fan_out, role, stream, bias_init=0.0):
    store.add(f"{prefix}.w", _glorot(stream, fan_in, fan_out), role)
    store.add(f"{prefix}.b", np.full(fan_out, bias_init), role)


def _affine(leaves, prefix, i, x: Tensor) -> Tensor:
    return x @ leaves[f"{prefix}.w{i}"] + leaves[f"{prefix}.b{i}"]


def _activate(x: Tensor, nonlinearity: str) -> Tensor:
    return x.elu() if nonlinearity == "elu" else x.relu()


def _chain_forward(leaves, prefix: str, n_layers: int, x: Tensor, nonlinearity: str,
                   final_activation: bool) -> Tensor:
    for i in range(n_layers):
        x = _affine(leaves, prefix, i, x)
        if i < n_layers - 1 or final_activation:
            x = _activate(x, nonlinearity)
    return x


def _head(leaves, prefix, x: Tensor) -> Tensor:
    return x @ leaves[f"{prefix}.w"] + leaves[f"{prefix}.b"]


def _as_matrix(graph: Graph, x) -> Tensor:
    t = x if isinstance(x, Tensor) else graph.tensor(np.asarray(x, dtype=np.float64))
    if t.ndim != 2:
        raise DimensionError(f"expected a 2-d input batch, got shape {t.shape}")
    return t


# ---------------------------------------------------------------------------
# Classification pathway
# ---------------------------------------------------------------------------


class ClassifierNetworks:
    """Shared extractor + per-class amortized weight posteriors + softmax head."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self._extractor_dims = [spec.input_dim, *spec.extractor_widths, spec.feature_dim]
        self._identity_extractor = (
            not spec.extractor_widths and spec.feature_dim == spec.input_dim
        )
        self._trunk_dims = [spec.feature_dim, *spec.amort_post_widths]

    def init_params(self, stream: RandomStream) -> ParameterStore:
        store = ParameterStore()
        if not self._identity_extractor:
            _add_chain(store, "extractor", self._extractor_dims, ROLE_SHARED, stream.split("extractor"))
        _add_chain(store, "class_amort", self._trunk_dims, ROLE_AMORTIZATION, stream.split("amort"))
        head_in = self._trunk_dims[-1]
        head_out = self.spec.feature_dim + 1  # weight vector plus bias
        s = stream.split("heads")
        _add_head(store, "class_amort.mean", head_in, head_out, ROLE_AMORTIZATION, s)
        # start the weight posteriors narrow so early logit noise is small
        _add_head(store, "class_amort.logvar", head_in, head_out, ROLE_AMORTIZATION, s, bias_init=-4.0)
        return store

    def extract_features(self, g: Graph, leaves, x) -> Tensor:
        """MLP features [n, feature_dim]; rows are computed independently."""
        t = _as_matrix(g, x)
        if t.shape[1] != self.spec.input_dim:
            raise DimensionError(
                f"extract_features: input dim {t.shape[1]} != spec {self.spec.input_dim}"
            )
        if self._identity_extractor:
            return t
        n_layers = len(self._extractor_dims) - 1
        return _chain_forward(leaves, "extractor", n_layers, t, self.spec.nonlinearity,
                              final_activation=False)

    def infer_class_posterior(self, g: Graph, leaves, class_features: Tensor) -> DiagGaussian:
        """Pool one class's feature rows, then map to a (w, b) posterior.

        Output dimension is feature_dim + 1 regardless of the shot count or of
        how many other classes the episode has.
        """
        if class_features.shape[0] < 1:
            raise ContractError("infer_class_posterior: class has zero shots")
        order = canonical_row_order(class_features.values)
        pooled = pooled_row_mean(class_features, order)  # [1, d]
        n_layers = len(self._trunk_dims) - 1
        trunk = _chain_forward(leaves, "class_amort", n_layers, pooled,
                               self.spec.nonlinearity, final_activation=True)
        mean = _squeeze_row(_head(leaves, "class_amort.mean", trunk))
        log_var = _squeeze_row(
            _clamp(_head(leaves, "class_amort.logvar", trunk),
                   self.spec.logvar_min, self.spec.logvar_max)
        )
        return DiagGaussian(mean, log_var)

    def build_task_posterior(self, g: Graph, leaves, episode: Episode,
                             include_targets: bool = False) -> TaskPosterior:
        """One amortized posterior factor per class, in class-label order.

        Class-c context rows are sorted into canonical order and extracted in
        their own forward pass, so factor c is bitwise independent of every
        other class's context.
        """
        xs, ys = episode.context_x, episode.context_y
        if include_targets:
            xs = np.concatenate([xs, episode.target_x])
            ys = np.concatenate([ys, episode.target_y])
        way = episode.way if episode.way is not None else int(ys.max()) + 1
        factors = []
        for c in range(way):
            rows = xs[ys == c]
            if rows.shape[0] == 0:
                raise ContractError(f"class {c} has zero context shots")
            rows = rows[canonical_row_order(rows)]
            feats = self.extract_features(g, leaves, rows)
            factors.append(self.infer_class_posterior(g, leaves, feats))
        return TaskPosterior("classification", factors)

    def predict(self, g: Graph, leaves, posterior: TaskPosterior, x,
                n_samples: int, stream: RandomStream) -> Tensor:
        """Per-point class log-probabilities [M, C].

        Draws ``n_samples`` logit matrices through the induced logit
        distributions and returns log of the averaged softmax (log-mean-exp
        over samples, max-stabilized).
        """
        if n_samples < 1:
            raise ContractError(f"predict: n_samples must be >= 1, got {n_samples}")
        feats = self.extract_features(g, leaves, x)
        logits = local_reparam_logit_samples(feats, posterior.factors, n_samples, stream)
        log_soft = logits - logits.logsumexp(axis=2, keepdims=True)
        return log_soft.logsumexp(axis=0) - float(np.log(n_samples))

    def episode_log_liks(self, g: Graph, leaves, posterior: TaskPosterior,
                         x, y, n_samples: int, stream: RandomStream) -> EpisodeLogLiks:
        if n_samples < 1:
            raise ContractError(f"episode_log_liks: n_samples must be >= 1, got {n_samples}")
        feats = self.extract_features(g, leaves, x)
        logits = local_reparam_logit_samples(feats, posterior.factors, n_samples, stream)
        log_soft = logits - logits.logsumexp(axis=2, keepdims=True)  # [L, M, C]
        labels = np.asarray(y, dtype=np.int64)
        one_hot = np.zeros((labels.size, posterior.class_count))
        one_hot[np.arange(labels.size), labels] = 1.0
        picked = (log_soft * g.tensor(one_hot)).sum(axis=2)  # [L, M]
        # metric-only prediction: average the sample softmaxes in value space
        vals = log_soft.values
        m = vals.max(axis=0, keepdims=True)
        avg = np.exp(vals - m).mean(axis=0)
        predicted = np.argmax(np.log(np.maximum(avg, 1e-300)) + m[0], axis=1)
        return EpisodeLogLiks(picked, 0, predicted)

    def posterior_factor_dims(self, episode: Episode) -> list:
        way = episode.way if episode.way is not None else int(episode.context_y.max()) + 1
        return [self.spec.feature_dim + 1] * way


# ---------------------------------------------------------------------------
# Scalar Gaussian pathway
# ---------------------------------------------------------------------------


class ToyAmortizer:
    """Linear amortization for the scalar Gaussian family.

    q mean  = w_mu * sum(y) + b_mu
    q var   = exp(w_sigma * sum(y) + b_sigma)

    The exp link keeps the variance positive under unconstrained optimization
    and makes the exact posterior representable for a fixed context size.
    """

    PARAM_NAMES = ("toy.w_mu", "toy.b_mu", "toy.w_sigma", "toy.b_sigma")

    def __init__(self, spec: ToyModelSpec):
        self.spec = spec

    def init_params(self, stream: RandomStream | None = None) -> ParameterStore:
        store = ParameterStore()
        for name in self.PARAM_NAMES:
            store.add(name, np.zeros(1), ROLE_AMORTIZATION)
        return store

    def build_task_posterior(self, g: Graph, leaves, episode: Episode,
                             include_targets: bool = False) -> TaskPosterior:
        ys = episode.context_y
        if include_targets:
            ys = np.concatenate([ys, episode.target_y])
        total = float(np.sum(ys))
        mean = leaves["toy.w_mu"] * total + leaves["toy.b_mu"]
        log_var = leaves["toy.w_sigma"] * total + leaves["toy.b_sigma"]
        return TaskPosterior("latent", [DiagGaussian(mean, log_var)])

    def episode_log_liks(self, g: Graph, leaves, posterior: TaskPosterior,
                         x, y, n_samples: int, stream: RandomStream) -> EpisodeLogLiks:
        if n_samples < 1:
            raise ContractError(f"episode_log_liks: n_samples must be >= 1, got {n_samples}")
        psi = sample_many(posterior.factors[0], n_samples, stream)  # [L, 1]
        targets = g.tensor(np.asarray(y, dtype=np.float64).reshape(-1))
        obs_var = self.spec.obs_var
        norm = -0.5 * float(np.log(2.0 * np.pi * obs_var))
        ll = (targets - psi).square() * (-0.5 / obs_var) + norm  # [L, M]
        return EpisodeLogLiks(ll, 0, None)

    def expected_log_lik(self, g: Graph, leaves, q: DiagGaussian, x, y) -> Tensor:
        """Closed-form E_q[sum_n log N(y_n; psi, obs_var)] (exact, no sampling)."""
        targets = g.tensor(np.asarray(y, dtype=np.float64).reshape(-1))
        obs_var = self.spec.obs_var
        m = targets.shape[0]
        norm = -0.5 * float(np.log(2.0 * np.pi * obs_var)) * m
        quad = ((targets - q.mean).square() + q.log_var.exp()).sum() * (-0.5 / obs_var)
        return quad + norm

    def predict(self, g: Graph, leaves, posterior: TaskPosterior, values,
                n_samples: int, stream: RandomStream) -> Tensor:
        """Log predictive density at each target value, [M]."""
        if n_samples < 1:
            raise ContractError(f"predict: n_samples must be >= 1, got {n_samples}")
        liks = self.episode_log_liks(g, leaves, posterior, None, values, n_samples, stream)
        return liks.log_predictive()

    def posterior_factor_dims(self, episode: Episode) -> list:
        return [1]


# ---------------------------------------------------------------------------
# View-regression pathway
# ---------------------------------------------------------------------------


def _angle_encoding(angles: np.ndarray) -> np.ndarray:
    a = np.asarray(angles, dtype=np.float64).reshape(-1)
    return np.stack([np.cos(a), np.sin(a)], axis=1)


class ViewNetworks:
    """Latent-posterior amortizer over (image, azimuth) views plus a generator.

    The generator is the shared-parameter network; the per-view encoder,
    pre-pooling trunk, post-pooling trunk and posterior heads belong to the
    amortization role.  Pixel likelihood is Gaussian with fixed scale
    ``obs_sigma`` around sigmoid output means.
    """

    def __init__(self, spec: NetworkSpec, obs_sigma: float = 0.1):
        if obs_sigma <= 0:
            raise ContractError("obs_sigma must be positive")
        self.spec = spec
        self.obs_sigma = float(obs_sigma)
        self._enc_dims = [spec.output_dim, *spec.extractor_widths, spec.feature_dim]
        self._mid_dims = [spec.feature_dim + 2, *spec.amort_pre_widths]
        self._post_dims = [spec.amort_pre_widths[-1], *spec.amort_post_widths]
        self._gen_dims = [spec.latent_dim + 2, *spec.generator_widths, spec.output_dim]

    def init_params(self, stream: RandomStream) -> ParameterStore:
        store = ParameterStore()
        _add_chain(store, "generator", self._gen_dims, ROLE_SHARED, stream.split("generator"))
        _add_chain(store, "view_enc", self._enc_dims, ROLE_AMORTIZATION, stream.split("enc"))
        _add_chain(store, "view_mid", self._mid_dims, ROLE_AMORTIZATION, stream.split("mid"))
        _add_chain(store, "view_post", self._post_dims, ROLE_AMORTIZATION, stream.split("post"))
        s = stream.split("heads")
        _add_head(store, "view_post.mean", self._post_dims[-1], self.spec.latent_dim,
                  ROLE_AMORTIZATION, s)
        _add_head(store, "view_post.logvar", self._post_dims[-1], self.spec.latent_dim,
                  ROLE_AMORTIZATION, s, bias_init=-4.0)
        return store

    def infer_latent_posterior(self, g: Graph, leaves, images, angles) -> DiagGaussian:
        """Encode each view, pool across views, map to the latent posterior.

        Views are sorted into canonical order on the raw (angle, image) rows
        and each view is encoded in its own forward pass, so the posterior is
        bitwise invariant to view order and exact under duplicated views.
        """
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 2 or images.shape[1] != self.spec.output_dim:
            raise DimensionError(
                f"infer_latent_posterior: images {images.shape} != [k, {self.spec.output_dim}]"
            )
        if images.shape[0] < 1:
            raise ContractError("infer_latent_posterior: needs at least one view")
        ang = _angle_encoding(angles)
        raw = np.concatenate([ang, images], axis=1)
        order = canonical_row_order(raw)
        nonlin = self.spec.nonlinearity
        encoded_rows = []
        for i in order:
            img_row = g.tensor(images[int(i) : int(i) + 1])
            enc = _chain_forward(leaves, "view_enc", len(self._enc_dims) - 1, img_row,
                                 nonlin, final_activation=True)
            with_angle = concat([enc, g.tensor(ang[int(i) : int(i) + 1])], axis=1)
            mid = _chain_forward(leaves, "view_mid", len(self._mid_dims) - 1, with_angle,
                                 nonlin, final_activation=True)
            encoded_rows.append(mid)
        pooled = _tree_sum(encoded_rows) * (1.0 / len(encoded_rows))  # [1, h]
        post = _chain_forward(leaves, "view_post", len(self._post_dims) - 1, pooled,
                              nonlin, final_activation=True)
        mean = _squeeze_row(_head(leaves, "view_post.mean", post))
        log_var = _squeeze_row(
            _clamp(_head(leaves, "view_post.logvar", post),
                   self.spec.logvar_min, self.spec.logvar_max)
        )
        return DiagGaussian(mean, log_var)

    def build_task_posterior(self, g: Graph, leaves, episode: Episode,
                             include_targets: bool = False) -> TaskPosterior:
        images, angles = episode.context_y, episode.context_x
        if include_targets:
            images = np.concatenate([images, episode.target_y])
            angles = np.concatenate([angles, episode.target_x])
        return TaskPosterior("latent", [self.infer_latent_posterior(g, leaves, images, angles)])

    def decode(self, g: Graph, leaves, latent_row: Tensor, angles) -> Tensor:
        """Generator output means [M, pixels] for one latent row [1, d]."""
        ang = _angle_encoding(angles)
        m = ang.shape[0]
        tiled = latent_row + g.tensor(np.zeros((m, 1)))  # broadcast to [M, d]
        inputs = concat([tiled, g.tensor(ang)], axis=1)
        out = _chain_forward(leaves, "generator", len(self._gen_dims) - 1, inputs,
                             self.spec.nonlinearity, final_activation=False)
        return out.sigmoid()

    def episode_log_liks(self, g: Graph, leaves, posterior: TaskPosterior,
                         x, y, n_samples: int, stream: RandomStream) -> EpisodeLogLiks:
        if n_samples < 1:
            raise ContractError(f"episode_log_liks: n_samples must be >= 1, got {n_samples}")
        factor = posterior.factors[0]
        psi = sample_many(factor, n_samples, stream)  # [L, d]
        targets = np.asarray(y, dtype=np.float64)
        pixels = targets.shape[1]
        var = self.obs_sigma**2
        norm = -0.5 * pixels * float(np.log(2.0 * np.pi * var))
        cols = []
        target_t = g.tensor(targets)
        for l in range(n_samples):
            means = self.decode(g, leaves, psi.slice(0, l, l + 1), x)  # [M, P]
            sq = (target_t - means).square().sum(axis=1, keepdims=True)  # [M, 1]
            cols.append(sq * (-0.5 / var) + norm)
        return EpisodeLogLiks(concat(cols, axis=1), 1, None)  # [M, L]

    def reconstruct(self, g: Graph, leaves, posterior: TaskPosterior, angles) -> np.ndarray:
        """Deterministic reconstruction: decode at the posterior mean latent."""
        factor = posterior.factors[0]
        row = factor.mean + g.tensor(np.zeros((1, 1)))  # [d] -> [1, d], exact broadcast
        return self.decode(g, leaves, row, angles).values

    def predict(self, g: Graph, leaves, posterior: TaskPosterior, x,
                n_samples: int, stream: RandomStream):
        """Per-sample pixel means [L, M, P] (values) plus the likelihood scale."""
        if n_samples < 1:
            raise ContractError(f"predict: n_samples must be >= 1, got {n_samples}")
        psi = sample_many(posterior.factors[0], n_samples, stream)
        means = np.stack(
            [self.decode(g, leaves, psi.slice(0, l, l + 1), x).values for l in range(n_samples)]
        )
        return means, self.obs_sigma

    def posterior_factor_dims(self, episode: Episode) -> list:
        return [self.spec.latent_dim]
