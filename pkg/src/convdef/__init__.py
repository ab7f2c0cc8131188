"""Convolutionally tied deep exponential families over count data.

Sparse gamma latent layers with Poisson observations, weights tied into
shifted copies of one filter, trained by black-box variational inference
over Markov blankets. See the README for the CLI and file formats.
"""

import logging

from ._backend import BACKEND
from .data import CountMatrix, MaskSpec, SynthSpec, apply_mask, split_loyo, synth_generate
from .expfam import (
    GammaParams,
    PoissonParams,
    gamma_log_density,
    gamma_sample,
    gamma_score,
    poisson_log_pmf,
)
from .inference import (
    EstimatorConfig,
    OptimizerConfig,
    VariationalState,
    elbo_estimate,
    fit_test,
    grad_w,
    grad_z,
    heldout_loglik,
    train,
)
from .model import (
    LayerSpec,
    ModelSpec,
    TiedWeightMatrix,
    TyingMap,
    blanket_logp_w,
    blanket_logp_z,
    build_tying,
    linked_params,
    log_joint,
    obs_rate,
)

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    "BACKEND",
    "__version__",
    "GammaParams",
    "PoissonParams",
    "gamma_log_density",
    "gamma_score",
    "gamma_sample",
    "poisson_log_pmf",
    "TyingMap",
    "TiedWeightMatrix",
    "LayerSpec",
    "ModelSpec",
    "build_tying",
    "linked_params",
    "obs_rate",
    "blanket_logp_z",
    "blanket_logp_w",
    "log_joint",
    "CountMatrix",
    "MaskSpec",
    "SynthSpec",
    "apply_mask",
    "split_loyo",
    "synth_generate",
    "EstimatorConfig",
    "OptimizerConfig",
    "VariationalState",
    "elbo_estimate",
    "grad_z",
    "grad_w",
    "train",
    "fit_test",
    "heldout_loglik",
]
