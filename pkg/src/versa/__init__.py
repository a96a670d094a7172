"""Amortized task-posterior inference for few-shot learning.

A small, fully deterministic stack: a reverse-mode autodiff engine over dense
float64 tensors, diagonal-Gaussian posterior machinery, set-input
amortization networks, Monte-Carlo predictive and variational objectives,
point-estimate adaptation baselines, seeded episodic task generators, an
analytic conjugate-Gaussian oracle, and an Adam trainer with a CLI.
"""

from .autodiff import Graph, Tensor, finite_difference_check, forward_op
from .distributions import DiagGaussian, GaussianPrior, kl_divergence, log_prob, sample
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    OptimizationError,
    VersaError,
)
from .networks import (
    ClassifierNetworks,
    NetworkSpec,
    ParameterStore,
    TaskPosterior,
    ToyAmortizer,
    ViewNetworks,
)
from .adaptation import make_strategy
from .objectives import (
    ObjectiveReport,
    amortized_vi_loss,
    evaluate,
    mlpip_loss,
    nonamortized_vi_fit,
)
from .rng import RandomStream
from .tasks import (
    ClusterTaskSpec,
    Episode,
    ToyModelSpec,
    sample_cluster_episode,
    sample_glyph_episode,
    sample_toy_episode,
    sample_view_episode,
)
from .training import (
    AdamState,
    TrainConfig,
    adam_step,
    load_checkpoint,
    run_toy_experiment,
    run_versatility_sweep,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
