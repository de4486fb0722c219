"""Diagonal Gaussians, categoricals and their closed-form divergences.

Everything is computed in log space.  The functions accept plain arrays
or tape variables; leading axes are treated as batch axes and the last
axis as the event axis, so ``mvn_logpdf_diag`` on ``(B, D)`` inputs
returns ``(B,)`` log-densities.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import DomainError, ShapeError
from . import autodiff as ad
from .autodiff import Var, value_of

LOG_2PI = float(np.log(2.0 * np.pi))

__all__ = [
    "DiagGaussian",
    "CategoricalDist",
    "mvn_logpdf_diag",
    "kl_diag_gaussians",
    "kl_categorical",
    "log_softmax",
    "entropy",
    "cross_entropy",
]


def _check_var(var):
    v = value_of(var)
    if not isinstance(var, Var) and np.any(~(np.asarray(v) > 0)):
        raise DomainError("variance must be strictly positive")


@dataclass(frozen=True)
class DiagGaussian:
    """Gaussian with diagonal covariance; ``var`` holds elementwise variances."""

    mean: object
    var: object

    def __post_init__(self):
        if np.shape(value_of(self.mean)) != np.shape(value_of(self.var)):
            raise ShapeError(
                f"mean shape {np.shape(value_of(self.mean))} != var shape {np.shape(value_of(self.var))}"
            )
        _check_var(self.var)

    @property
    def std(self):
        return ad.sqrt(self.var)

    def log_prob(self, x):
        return mvn_logpdf_diag(x, self)

    def sample(self, rng: np.random.Generator):
        m = value_of(self.mean)
        return m + np.sqrt(value_of(self.var)) * rng.standard_normal(np.shape(m))


@dataclass(frozen=True)
class CategoricalDist:
    """Categorical distribution stored as normalized log-probabilities."""

    log_probs: object

    @property
    def probs(self):
        return ad.exp(self.log_probs)

    @property
    def num_categories(self) -> int:
        return np.shape(value_of(self.log_probs))[-1]

    def argmax(self):
        # np.argmax returns the first maximal index, i.e. ties go to the lowest skill
        return np.argmax(value_of(self.log_probs), axis=-1)


def mvn_logpdf_diag(x, g: DiagGaussian):
    """Log-density of ``x`` under a diagonal Gaussian, summed over the last axis."""
    if np.shape(value_of(x))[-1:] != np.shape(value_of(g.mean))[-1:]:
        raise ShapeError(
            f"length mismatch: x {np.shape(value_of(x))} vs mean {np.shape(value_of(g.mean))}"
        )
    _check_var(g.var)
    if not isinstance(x, Var):
        x = np.asarray(x, dtype=np.float64)
    return ad.gauss_logpdf(x, g.mean, g.var)


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian):
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if np.shape(value_of(q.mean))[-1:] != np.shape(value_of(p.mean))[-1:]:
        raise ShapeError("KL between Gaussians of different dimension")
    _check_var(q.var)
    _check_var(p.var)
    return ad.kl_gauss(q.mean, q.var, p.mean, p.var)


def log_softmax(logits) -> CategoricalDist:
    """Normalize logits into a :class:`CategoricalDist` (max-shifted, overflow safe)."""
    if np.shape(value_of(logits))[-1:] in ((), (0,)):
        raise ShapeError("log_softmax of an empty vector")
    return CategoricalDist(logits - ad.logsumexp(logits, axis=-1, keepdims=True))


def _xlogy_weights(q):
    # 0 * log 0 := 0: mask out zero-probability categories of q
    qv = np.exp(value_of(q.log_probs))
    return qv > 0


def kl_categorical(q: CategoricalDist, p: CategoricalDist):
    """KL(q || p) over the last axis; ``inf`` (with a warning) if p lacks q's support."""
    if q.num_categories != p.num_categories:
        raise ShapeError("categoricals over different numbers of categories")
    lq, lp = q.log_probs, p.log_probs
    support = _xlogy_weights(q)
    lpv = value_of(lp)
    if np.any(support & np.isneginf(lpv)):
        warnings.warn("KL(q||p) is infinite: p assigns zero mass where q does not", RuntimeWarning, stacklevel=2)
        return np.where(np.any(support & np.isneginf(lpv), axis=-1), np.inf, 0.0)[()]
    if np.all(support):
        return ad.sum(ad.exp(lq) * (lq - lp), axis=-1)
    # zero-mass categories of q contribute nothing; replace them by a finite dummy
    lq_safe = _masked(lq, support)
    lp_safe = _masked(lp, support)
    return ad.sum(ad.exp(lq) * (lq_safe - lp_safe), axis=-1)


def _masked(logp, support):
    return ad.where(support, logp, 0.0)


def cross_entropy(q: CategoricalDist, p: CategoricalDist):
    """H(q, p) = -sum_c q_c log p_c, with 0 log 0 := 0."""
    support = _xlogy_weights(q)
    return -ad.sum(ad.exp(q.log_probs) * _masked(p.log_probs, support), axis=-1)


def entropy(q: CategoricalDist):
    """H(q) = -sum_c q_c log q_c, with 0 log 0 := 0."""
    support = _xlogy_weights(q)
    return -ad.sum(ad.exp(q.log_probs) * _masked(q.log_probs, support), axis=-1)
