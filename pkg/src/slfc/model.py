"""Switching latent feedback controller.

An encoder maps observations to a Gaussian over a latent state ``z``.  A
switcher network scores ``C`` skills from ``z``.  Skill ``c`` owns a goal
``g_c`` (row of the goal bank) and a gain ``K_c`` (slab of the gain
bank) and emits actions ``u ~ N(K_c (g_c - z), sigma_u(z, c))``.  A decoder
reconstructs the observation from ``z`` with a shared learnable diagonal
covariance.

Parameters live in a flat ``dict`` of arrays inside :class:`ModelParams`.
All forward functions also accept tape variables in place of arrays, which
is how the training loss is differentiated.

Skill indices are 0-based throughout the Python API.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError
from .numcore import CategoricalDist, DiagGaussian, log_softmax, pinv
from .numcore import autodiff as ad
from .numcore.autodiff import Var, value_of
from .numcore.linalg import PINV_RTOL

VARIANTS = {
    "mdn": (False, False),
    "mdn_fb": (True, False),
    "mdn_fb_sw": (True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int
    action_dim: int
    latent_dim: int
    num_skills: int
    history: int = 1
    encoder_hidden: tuple[int, ...] = (64, 64)
    decoder_hidden: tuple[int, ...] = (64, 64)
    switcher_hidden: int = 64
    var_floor: float = 1e-5
    init_var: float = 1e-2  # starting value of every learned variance except the latent prior
    feedback_structure: bool = True
    switch_kl: bool = True

    def __post_init__(self):
        for name in ("obs_dim", "action_dim", "latent_dim", "num_skills", "history", "switcher_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(int(h) for h in self.decoder_hidden))
        if any(h < 1 for h in self.encoder_hidden + self.decoder_hidden):
            raise ConfigError("hidden widths must be >= 1")
        if not self.var_floor > 0:
            raise ConfigError("var_floor must be > 0")
        if not self.init_var > self.var_floor:
            raise ConfigError("init_var must exceed var_floor")

    @property
    def input_dim(self) -> int:
        """Encoder input width: ``history`` stacked observations."""
        return self.obs_dim * self.history

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == (self.feedback_structure, self.switch_kl):
                return name
        return "sw_only"

    def with_variant(self, variant: str) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        fb, sw = VARIANTS[variant]
        return dataclasses.replace(self, feedback_structure=fb, switch_kl=sw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    """All trainable arrays of the model plus the config they belong to."""

    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: np.array(v, copy=True) for k, v in self.arrays.items()})

    def with_arrays(self, arrays: Mapping) -> "ModelParams":
        return ModelParams(self.config, dict(arrays))

    def num_parameters(self) -> int:
        return int(sum(np.size(value_of(v)) for v in self.arrays.values()))


class ControllerForm(NamedTuple):
    gain: np.ndarray
    goal: np.ndarray
    residual: float


# -- initialization -------------------------------------------------------------


def _dense(rng, fan_in, fan_out, zero=False):
    if zero:
        return np.zeros((fan_in, fan_out)), np.zeros(fan_out)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), rng.uniform(-bound, bound, size=fan_out)


def _mlp_params(rng, prefix, sizes):
    out = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"{prefix}.W{i}"], out[f"{prefix}.b{i}"] = _dense(rng, a, b)
    return out


def _orthonormalish(rng, rows, cols):
    q, r = np.linalg.qr(rng.normal(size=(max(rows, cols), min(rows, cols))))
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fresh parameters: fan-in uniform trunks, zero output layers, distinct goals."""
    cfg = config
    S, A, C, H = cfg.latent_dim, cfg.action_dim, cfg.num_skills, cfg.switcher_hidden
    p = {}
    p.update(_mlp_params(rng, "enc", (cfg.input_dim, *cfg.encoder_hidden)))
    h_enc = cfg.encoder_hidden[-1]
    p["enc.Wm"], p["enc.bm"] = _dense(rng, h_enc, S, zero=True)
    p["enc.Wv"], p["enc.bv"] = _dense(rng, h_enc, S, zero=True)
    # variances move one Adam step (~lr) at a time in log space, so start them small
    log_v0 = np.log(cfg.init_var - cfg.var_floor)
    p["enc.bv"] += np.log(np.expm1(cfg.init_var - cfg.var_floor))
    p.update(_mlp_params(rng, "dec", (S, *cfg.decoder_hidden)))
    p["dec.Wm"], p["dec.bm"] = _dense(rng, cfg.decoder_hidden[-1], cfg.input_dim, zero=True)
    p["dec.logvar"] = np.full(cfg.input_dim, np.log(cfg.init_var))
    p["sw.W0"], p["sw.b0"] = _dense(rng, S, H)
    p["sw.Wl"], p["sw.bl"] = _dense(rng, H, C, zero=True)
    p["sw.Wn"], p["sw.bn"] = _dense(rng, H, C * A, zero=True)
    p["sw.bn"] += log_v0
    if cfg.feedback_structure:
        p["goals"] = rng.normal(scale=0.5, size=(C, S))
        p["gains"] = np.stack([0.1 * _orthonormalish(rng, A, S) for _ in range(C)])
    else:
        # a zero mean head would leave every component identical forever
        p["sw.Wmu"], p["sw.bmu"] = _dense(rng, H, C * A)
    p["prior.mean"] = np.zeros(S)
    p["prior.logvar"] = np.zeros(S)
    return ModelParams(cfg, p)


# -- helpers ------------------------------------------------------------------------


def _as_batch(x, width, what):
    """Return ``x`` as a 2-D batch plus a flag telling whether it was a single vector."""
    if isinstance(x, Var):
        if x.ndim != 2 or x.shape[-1] != width:
            raise ShapeError(f"{what}: expected (batch, {width}), got {x.shape}")
        return x, False
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1:] != (width,) or arr.ndim not in (1, 2):
        raise ShapeError(f"{what}: expected last dimension {width}, got shape {arr.shape}")
    return (arr[None, :], True) if arr.ndim == 1 else (arr, False)


def _unbatch(x, single):
    if single and not isinstance(x, Var):
        return x[0]
    return x


def _mlp(p, prefix, x, n_layers):
    h = x
    for i in range(n_layers):
        h = ad.tanh(ad.linear(h, p[f"{prefix}.W{i}"], p[f"{prefix}.b{i}"]))
    return h


# -- forward pieces -----------------------------------------------------------------


def encode(o, params: ModelParams) -> DiagGaussian:
    """Posterior ``q(z | o)``: tanh MLP, variance ``softplus(raw) + var_floor``."""
    cfg, p = params.config, params.arrays
    x, single = _as_batch(o, cfg.input_dim, "encode")
    h = _mlp(p, "enc", x, len(cfg.encoder_hidden))
    mean = ad.linear(h, p["enc.Wm"], p["enc.bm"])
    var = ad.softplus(ad.linear(h, p["enc.Wv"], p["enc.bv"])) + cfg.var_floor
    return DiagGaussian(_unbatch(mean, single), _unbatch(var, single))


def reparam_sample(g: DiagGaussian, noise):
    """``z = mean + sqrt(var) * noise``; differentiable in mean and var."""
    if np.shape(value_of(noise)) != np.shape(value_of(g.mean)):
        raise ShapeError(f"noise shape {np.shape(value_of(noise))} != mean shape {np.shape(value_of(g.mean))}")
    return g.mean + ad.sqrt(g.var) * noise


def decode(z, params: ModelParams) -> DiagGaussian:
    """Likelihood ``p(o | z)`` with a single learned diagonal covariance."""
    cfg, p = params.config, params.arrays
    zb, single = _as_batch(z, cfg.latent_dim, "decode")
    h = _mlp(p, "dec", zb, len(cfg.decoder_hidden))
    mean = ad.linear(h, p["dec.Wm"], p["dec.bm"])
    var = ad.exp(p["dec.logvar"])
    return DiagGaussian(_unbatch(mean, single), _unbatch(_broadcast_rows(var, mean), single))


def _broadcast_rows(row, like):
    n = np.shape(value_of(like))[0]
    if isinstance(row, Var) or isinstance(like, Var):
        return ad.reshape(row, (1, -1)) + np.zeros((n, 1))
    return np.broadcast_to(row, (n, np.shape(row)[-1])).copy()


def prior(params: ModelParams) -> DiagGaussian:
    p = params.arrays
    return DiagGaussian(p["prior.mean"], ad.exp(p["prior.logvar"]))


def _switch_trunk(p, z):
    return ad.tanh(ad.linear(z, p["sw.W0"], p["sw.b0"]))


def switch_prior(z, params: ModelParams) -> CategoricalDist:
    """``pi(c | z)``: log-softmax of the switcher logits."""
    cfg, p = params.config, params.arrays
    zb, single = _as_batch(z, cfg.latent_dim, "switch_prior")
    logits = ad.linear(_switch_trunk(p, zb), p["sw.Wl"], p["sw.bl"])
    return CategoricalDist(_unbatch(log_softmax(logits).log_probs, single))


class SkillHeads(NamedTuple):
    """Per-skill quantities for a batch of latents, each shaped ``(B, C, ...)``."""

    log_prior: object  # (B, C)
    action_mean: object  # (B, C, A)
    action_var: object  # (B, C, A)


def skill_heads(zb, params: ModelParams) -> SkillHeads:
    """Switcher prior and every skill's action distribution for a batch ``zb`` of shape ``(B, S)``."""
    cfg, p = params.config, params.arrays
    B = np.shape(value_of(zb))[0]
    C, A = cfg.num_skills, cfg.action_dim
    h = _switch_trunk(p, zb)
    log_prior = log_softmax(ad.linear(h, p["sw.Wl"], p["sw.bl"])).log_probs
    var = ad.exp(ad.reshape(ad.linear(h, p["sw.Wn"], p["sw.bn"]), (B, C, A))) + cfg.var_floor
    if cfg.feedback_structure:
        err = ad.reshape(p["goals"], (1, C, cfg.latent_dim)) - ad.reshape(zb, (B, 1, cfg.latent_dim))
        mean = ad.einsum("cas,bcs->bca", p["gains"], err)
    else:
        mean = ad.reshape(ad.linear(h, p["sw.Wmu"], p["sw.bmu"]), (B, C, A))
    return SkillHeads(log_prior, mean, var)


def _gauss_logpdf_last(u, mean, var):
    return ad.gauss_logpdf(u, mean, var)


def skill_log_likelihoods(ub, heads: SkillHeads):
    """``log N(u; mean_c, var_c)`` for every skill, shape ``(B, C)``."""
    B = np.shape(value_of(ub))[0]
    A = np.shape(value_of(ub))[-1]
    return _gauss_logpdf_last(ad.reshape(ub, (B, 1, A)), heads.action_mean, heads.action_var)


def policy(z, c: int, params: ModelParams) -> DiagGaussian:
    """Action distribution of skill ``c`` at latent ``z``."""
    cfg = params.config
    if not 0 <= int(c) < cfg.num_skills:
        raise IndexError(f"skill index {c} out of range [0, {cfg.num_skills})")
    zb, single = _as_batch(z, cfg.latent_dim, "policy")
    heads = skill_heads(zb, params)
    return DiagGaussian(_unbatch(heads.action_mean[:, c], single), _unbatch(heads.action_var[:, c], single))


def _joint(zb, ub, params):
    heads = skill_heads(zb, params)
    loglik = skill_log_likelihoods(ub, heads)
    return heads, loglik, heads.log_prior + loglik


def posterior_skill(z, u, params: ModelParams) -> CategoricalDist:
    """Analytic ``q(delta = c | z, u)``: prior times action likelihood, normalized."""
    cfg = params.config
    zb, single = _as_batch(z, cfg.latent_dim, "posterior_skill")
    ub, _ = _as_batch(u, cfg.action_dim, "posterior_skill")
    _, _, joint = _joint(zb, ub, params)
    jv = value_of(joint)
    if np.any(np.all(np.isneginf(jv), axis=-1)):
        raise DegenerateInputError("every skill assigns zero likelihood to the action")
    return CategoricalDist(_unbatch(joint - ad.logsumexp(joint, axis=-1, keepdims=True), single))


def mixture_action_density(z, u, params: ModelParams):
    """``log sum_c pi(c|z) N(u; mean_c(z), var_c(z))``."""
    cfg = params.config
    zb, single = _as_batch(z, cfg.latent_dim, "mixture_action_density")
    ub, _ = _as_batch(u, cfg.action_dim, "mixture_action_density")
    _, _, joint = _joint(zb, ub, params)
    return _unbatch(ad.logsumexp(joint, axis=-1), single)


def act(z, params: ModelParams):
    """Execution step: ``c = argmax pi(c|z)`` (lowest index on ties), ``u`` = that skill's mean."""
    cfg = params.config
    zb, single = _as_batch(z, cfg.latent_dim, "act")
    heads = skill_heads(zb, params)
    c = np.argmax(value_of(heads.log_prior), axis=-1)
    u = value_of(heads.action_mean)[np.arange(len(c)), c]
    return (u[0], int(c[0])) if single else (u, c)


# -- layer <-> controller algebra ---------------------------------------------------


def layer_to_controller(W, b, tol: float = PINV_RTOL) -> ControllerForm:
    """Rewrite a linear layer ``W z + b`` as the feedback law ``K (g - z)``.

    ``K = -W`` and ``g = -pinv(W) b``.  The identity is exact when ``b`` lies
    in the column space of ``W``; otherwise ``residual`` is the norm of the
    part of ``b`` the goal cannot absorb.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (W.shape[0],):
        raise ShapeError(f"bias shape {b.shape} incompatible with W {W.shape}")
    K = -W
    g = -pinv(W, tol) @ b
    residual = float(np.linalg.norm(W @ (pinv(W, tol) @ b) - b))
    return ControllerForm(K, g, residual)


def estimate_goal(K, u, z, tol: float = PINV_RTOL) -> np.ndarray:
    """Goal consistent with action ``u`` at state ``z``: ``pinv(K) u + z``."""
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    return pinv(K, tol) @ np.asarray(u, dtype=np.float64) + np.asarray(z, dtype=np.float64)


def controller_bank(params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Goal bank ``(C, S)`` and gain bank ``(C, A, S)`` of a feedback-structured model."""
    if not params.config.feedback_structure:
        raise ConfigError("model was built without the feedback structure; no gain bank")
    return np.asarray(value_of(params["goals"])), np.asarray(value_of(params["gains"]))
