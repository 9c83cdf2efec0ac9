"""Deterministic and variational Bayesian speaker adaptation of DNN hidden layers."""
from .numerics import (
    SIGMA_FLOOR,
    GaussianSpec,
    RandomStream,
    derive_seed,
    fd_gradient,
    gaussian_draw,
    kl_diag_gaussian,
)
from .network import (
    LabeledFrames,
    Network,
    NetworkConfig,
    TrainConfig,
    backward,
    forward,
    pseudo_label,
    train_si,
)
from .adapt_det import (
    Activation,
    AdaptHyper,
    AdaptMethod,
    KLOutputRegularizer,
    MAPRegularizer,
    NoisyRegularizer,
    NoRegularizer,
    Variant,
    adapt_min_ce,
    apply_sd,
    kl_output_penalty,
    neutral_params,
    sd_gradient,
)
from .adapt_bayes import (
    BayesHyper,
    Posterior,
    PriorSpec,
    adapt_bayes,
    default_lambda,
    elbo_step,
    empirical_prior,
    fixed_prior,
    infer,
    init_posterior,
)
from .sat import SatState, train_sat
from .datagen import Corpus, GenConfig, budget_split, generate_corpus

__version__ = "0.1.0"
