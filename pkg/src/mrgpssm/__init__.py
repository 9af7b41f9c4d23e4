"""Multi-resolution Gaussian process state-space models.

A library and CLI for sparse-GP latent dynamics with per-component
resolutions: variational training on dilated mini-batches, an exact SDE
reinterpretation of the transition model, a backfitting trainer, and a
numerical verification suite for the underlying equivalence results.
"""

from .errors import (
    DataError,
    DimensionMismatch,
    MissingCache,
    NonPositiveStep,
    NonScalarRoot,
    NotPositiveDefinite,
    NumericError,
    Singular,
    UnsupportedOp,
    WindowTooLong,
)
from .gauss import (
    Gaussian,
    GaussianConditionalForm,
    Jitter,
    affine_condition,
    block_inverse,
    chol_psd,
    kl_gaussian,
    mvn_logpdf,
    mvn_sample,
)
from .kernels import (
    InducingSet,
    KernelView,
    RbfKernel,
    SparsePosterior,
    conditional_given_fM,
    cross_gram,
    gram,
    kernel_eval,
    sde_rescaled,
    sparse_conditional,
)
from .model import (
    ComponentParams,
    Dataset,
    EmissionParams,
    Model,
    default_component,
    default_model,
    emission_logpdf,
    emission_mean,
    gpssm_transition,
    load_model,
    prior_transition_given_fM,
    save_model,
    sde_transition,
)
from .rng import RngStream
from .sampling import (
    AnalyticState,
    LatentPath,
    Scheme,
    analytic_step,
    prior_analytic_step,
    sample_dilated,
    sample_seq_fullmc,
    sample_seq_prssm,
)
from .elbo import ElboEstimate, elbo_minibatch, kl_terms, partial_residual
from .training import (
    AdamState,
    CachedLatents,
    TrainConfig,
    adam_step,
    backfit,
    lr_schedule,
    refresh_cache,
    update_component,
)
from .datagen import (
    MultiScaleConfig,
    PendulumConfig,
    gen_multiscale,
    gen_pendulum,
    normalize,
    read_csv,
    write_csv,
)
from .forecast import Prediction, metrics, nll, predict, rmse

__version__ = "0.1.0"
