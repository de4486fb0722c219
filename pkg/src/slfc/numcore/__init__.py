"""Numerical foundation: distributions, divergences, linear algebra, autodiff."""

from . import autodiff
from .autodiff import Tape, Var, numeric_grad, value_of
from .dists import (
    CategoricalDist,
    DiagGaussian,
    cross_entropy,
    entropy,
    kl_categorical,
    kl_diag_gaussians,
    log_softmax,
    mvn_logpdf_diag,
)
from .linalg import PINV_RTOL, eigvals, penrose_residuals, pinv

__all__ = [
    "autodiff",
    "Tape",
    "Var",
    "numeric_grad",
    "value_of",
    "CategoricalDist",
    "DiagGaussian",
    "cross_entropy",
    "entropy",
    "kl_categorical",
    "kl_diag_gaussians",
    "log_softmax",
    "mvn_logpdf_diag",
    "PINV_RTOL",
    "eigvals",
    "penrose_residuals",
    "pinv",
]
