"""Evidence lower bound of the switching latent controller.

Per (observation, action) pair, with ``z`` drawn once from ``q(z|o)`` by
reparameterization::

    ELBO = log p(o|z) + sum_c q(c|z,u) log p(u|c,z) - KL(q(z|o) || p(z)) - KL(q(c|z,u) || pi(c|z))

The skill expectation is taken analytically over the exact posterior, so
no categorical sample is ever drawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError, ShapeError
from .model import (
    ModelParams,
    decode,
    encode,
    prior,
    reparam_sample,
    skill_heads,
    skill_log_likelihoods,
)
from .numcore import (
    CategoricalDist,
    Tape,
    cross_entropy,
    entropy,
    kl_categorical,
    kl_diag_gaussians,
)
from .numcore import autodiff as ad
from .numcore.autodiff import value_of
from .numcore.dists import mvn_logpdf_diag

__all__ = [
    "ElboBreakdown",
    "LossWeights",
    "elbo_terms",
    "elbo_step",
    "switch_kl_decomposition",
    "batch_loss",
    "loss_and_grad",
]


@dataclass(frozen=True)
class ElboBreakdown:
    recon_obs: float
    recon_act: float
    kl_z: float
    kl_switch: float
    total: float

    @classmethod
    def from_terms(cls, recon_obs, recon_act, kl_z, kl_switch) -> "ElboBreakdown":
        recon_obs, recon_act, kl_z, kl_switch = (float(x) for x in (recon_obs, recon_act, kl_z, kl_switch))
        return cls(recon_obs, recon_act, kl_z, kl_switch, recon_obs + recon_act - kl_z - kl_switch)

    def as_row(self) -> tuple[float, float, float, float, float]:
        return (self.recon_obs, self.recon_act, self.kl_z, self.kl_switch, self.total)


@dataclass(frozen=True)
class LossWeights:
    """Multipliers on the four ELBO terms; all ones is the faithful bound."""

    w_obs: float = 1.0
    w_act: float = 1.0
    w_klz: float = 1.0
    w_klswitch: float = 1.0

    def __post_init__(self):
        if min(self.w_obs, self.w_act, self.w_klz, self.w_klswitch) < 0:
            raise ContractError("loss weights must be nonnegative")

    @classmethod
    def for_config(cls, config) -> "LossWeights":
        """Weights implied by the model's ablation flags (switch KL off -> weight 0)."""
        return cls(w_klswitch=1.0 if config.switch_kl else 0.0)


def elbo_terms(o, u, params: ModelParams, noise) -> dict:
    """Per-pair ELBO terms for a batch; values are ``(B,)`` arrays or tape variables."""
    q_z = encode(o, params)
    z = reparam_sample(q_z, noise)
    recon_obs = mvn_logpdf_diag(o, decode(z, params))
    heads = skill_heads(z, params)
    loglik = skill_log_likelihoods(u, heads)
    joint = heads.log_prior + loglik
    jv = value_of(joint)
    if np.any(np.all(np.isneginf(jv), axis=-1)):
        raise DegenerateInputError("every skill assigns zero likelihood to an action in the batch")
    log_q = joint - ad.logsumexp(joint, axis=-1, keepdims=True)
    q_delta = CategoricalDist(log_q)
    recon_act = ad.sum(ad.exp(log_q) * loglik, axis=-1)
    kl_z = kl_diag_gaussians(q_z, prior(params))
    kl_switch = kl_categorical(q_delta, CategoricalDist(heads.log_prior))
    return {"recon_obs": recon_obs, "recon_act": recon_act, "kl_z": kl_z, "kl_switch": kl_switch}


def _check_pair_batch(o, u, params):
    cfg = params.config
    o = np.asarray(o, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if o.ndim == 1:
        o, u = o[None], u[None]
    if o.shape[0] == 0:
        raise ContractError("empty batch")
    if o.shape[1:] != (cfg.input_dim,) or u.shape != (o.shape[0], cfg.action_dim):
        raise ShapeError(f"batch shapes o={o.shape}, u={u.shape} incompatible with model config")
    return o, u


def elbo_step(o, u, params: ModelParams, noise) -> ElboBreakdown:
    """Single-sample ELBO of one (o, u) pair with reparameterization draw ``noise``."""
    o, u = _check_pair_batch(o, u, params)
    noise = np.asarray(noise, dtype=np.float64).reshape(1, -1)
    t = elbo_terms(o, u, params, noise)
    return ElboBreakdown.from_terms(*(float(np.asarray(t[k])[0]) for k in ("recon_obs", "recon_act", "kl_z", "kl_switch")))


def switch_kl_decomposition(q: CategoricalDist, p: CategoricalDist):
    """Split KL(q || p) into cross-entropy H(q, p) and entropy H(q)."""
    return cross_entropy(q, p), entropy(q)


def _weighted_total(t, w: LossWeights):
    return w.w_obs * t["recon_obs"] + w.w_act * t["recon_act"] - w.w_klz * t["kl_z"] - w.w_klswitch * t["kl_switch"]


def _mean_breakdown(t) -> ElboBreakdown:
    return ElboBreakdown.from_terms(*(np.mean(value_of(t[k])) for k in ("recon_obs", "recon_act", "kl_z", "kl_switch")))


def batch_loss(o, u, params: ModelParams, weights: LossWeights | None = None, rng=None, noise=None):
    """Negative mean weighted ELBO over a batch of pairs.

    Exactly one of ``rng`` (draws the reparameterization noise) or ``noise``
    (an explicit ``(B, S)`` draw) should be given.

    Returns
    -------
    loss : float
    breakdown : ElboBreakdown
        Unweighted per-term means over the batch.
    """
    o, u = _check_pair_batch(o, u, params)
    weights = weights or LossWeights.for_config(params.config)
    noise = _resolve_noise(noise, rng, o.shape[0], params.config.latent_dim)
    t = elbo_terms(o, u, params, noise)
    return float(-np.mean(_weighted_total(t, weights))), _mean_breakdown(t)


def loss_and_grad(o, u, params: ModelParams, weights: LossWeights | None = None, rng=None, noise=None):
    """:func:`batch_loss` plus gradients of the loss for every parameter array."""
    o, u = _check_pair_batch(o, u, params)
    weights = weights or LossWeights.for_config(params.config)
    noise = _resolve_noise(noise, rng, o.shape[0], params.config.latent_dim)
    tape = Tape()
    vparams = params.with_arrays(tape.leaves_from(params.arrays))
    t = elbo_terms(o, u, vparams, noise)
    loss = -ad.mean(_weighted_total(t, weights))
    grads = tape.backward(loss)
    return float(loss.value), _mean_breakdown(t), grads


def _resolve_noise(noise, rng, batch, latent_dim):
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (batch, latent_dim):
            raise ShapeError(f"noise shape {noise.shape} != {(batch, latent_dim)}")
        return noise
    if rng is None:
        raise ContractError("either rng or noise is required")
    return rng.standard_normal((batch, latent_dim))
