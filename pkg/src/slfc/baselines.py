"""Behaviour cloning and mixture density network baselines."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, ShapeError
from .numcore import Tape, log_softmax
from .numcore import autodiff as ad
from .numcore.autodiff import value_of
from .simenv import Trajectory, pairs_from_dataset
from .train import AdamState, TrainConfig, adam_step, clip_by_global_norm

__all__ = [
    "BcConfig",
    "BcParams",
    "MdnConfig",
    "MdnParams",
    "init_bc",
    "init_mdn",
    "bc_predict",
    "bc_loss",
    "mdn_heads",
    "mdn_loss",
    "mdn_act",
    "mdn_params_from_model",
    "fit_bc",
    "fit_mdn",
    "bc_policy",
    "mdn_policy",
    "save_baseline",
    "load_baseline",
]


@dataclass(frozen=True)
class BcConfig:
    input_dim: int
    action_dim: int
    hidden: tuple[int, ...] = (256, 256)


@dataclass(frozen=True)
class MdnConfig:
    input_dim: int
    action_dim: int
    num_components: int
    hidden: tuple[int, ...] = (64, 64)
    var_floor: float = 1e-5


@dataclass
class BcParams:
    config: BcConfig
    arrays: dict = field(default_factory=dict)


@dataclass
class MdnParams:
    config: MdnConfig
    arrays: dict = field(default_factory=dict)


def _dense(rng, a, b):
    bound = 1.0 / np.sqrt(a)
    return rng.uniform(-bound, bound, size=(a, b)), rng.uniform(-bound, bound, size=b)


def _trunk_init(rng, sizes):
    out = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"trunk.W{i}"], out[f"trunk.b{i}"] = _dense(rng, a, b)
    return out


def _trunk(p, x, n_layers):
    h = x
    for i in range(n_layers):
        h = ad.tanh(ad.linear(h, p[f"trunk.W{i}"], p[f"trunk.b{i}"]))
    return h


def _batch(x, width, what):
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, ad.Var) else x
    if np.shape(value_of(x))[-1:] != (width,):
        raise ShapeError(f"{what}: expected last dimension {width}, got {np.shape(value_of(x))}")
    if np.ndim(value_of(x)) == 1:
        return x[None, :], True
    return x, False


# -- behaviour cloning --------------------------------------------------------------


def init_bc(config: BcConfig, rng: np.random.Generator) -> BcParams:
    p = _trunk_init(rng, (config.input_dim, *config.hidden))
    p["out.W"], p["out.b"] = _dense(rng, config.hidden[-1], config.action_dim)
    return BcParams(config, p)


def bc_predict(o, params: BcParams):
    cfg, p = params.config, params.arrays
    x, single = _batch(o, cfg.input_dim, "bc_predict")
    out = ad.linear(_trunk(p, x, len(cfg.hidden)), p["out.W"], p["out.b"])
    return out[0] if single and not isinstance(out, ad.Var) else out


def bc_loss(o, u, params: BcParams):
    """Mean squared error between predicted and demonstrated actions (mean over batch and dims)."""
    x, _ = _batch(o, params.config.input_dim, "bc_loss")
    ub, _ = _batch(u, params.config.action_dim, "bc_loss")
    if np.shape(value_of(x))[0] != np.shape(value_of(ub))[0]:
        raise ShapeError("o and u batches differ in length")
    return ad.mean(ad.square(bc_predict(x, params) - ub))


# -- mixture density network ------------------------------------------------------------


def init_mdn(config: MdnConfig, rng: np.random.Generator) -> MdnParams:
    C, A = config.num_components, config.action_dim
    p = _trunk_init(rng, (config.input_dim, *config.hidden))
    h = config.hidden[-1]
    p["head.Wl"], p["head.bl"] = np.zeros((h, C)), np.zeros(C)
    p["head.Wmu"], p["head.bmu"] = _dense(rng, h, C * A)
    p["head.Wn"], p["head.bn"] = np.zeros((h, C * A)), np.zeros(C * A)
    return MdnParams(config, p)


def mdn_heads(x, params: MdnParams):
    """Mixture log-weights ``(B, C)``, means ``(B, C, A)`` and variances ``(B, C, A)``."""
    cfg, p = params.config, params.arrays
    B = np.shape(value_of(x))[0]
    C, A = cfg.num_components, cfg.action_dim
    h = _trunk(p, x, len(cfg.hidden))
    log_w = log_softmax(ad.linear(h, p["head.Wl"], p["head.bl"])).log_probs
    mean = ad.reshape(ad.linear(h, p["head.Wmu"], p["head.bmu"]), (B, C, A))
    var = ad.exp(ad.reshape(ad.linear(h, p["head.Wn"], p["head.bn"]), (B, C, A))) + cfg.var_floor
    return log_w, mean, var


def mdn_loss(o, u, params: MdnParams):
    """Negative log-likelihood of a Gaussian mixture, averaged over the batch."""
    cfg = params.config
    x, _ = _batch(o, cfg.input_dim, "mdn_loss")
    ub, _ = _batch(u, cfg.action_dim, "mdn_loss")
    B = np.shape(value_of(x))[0]
    if np.shape(value_of(ub))[0] != B:
        raise ShapeError("o and u batches differ in length")
    log_w, mean, var = mdn_heads(x, params)
    comp = ad.gauss_logpdf(ad.reshape(ub, (B, 1, cfg.action_dim)), mean, var)
    return -ad.mean(ad.logsumexp(log_w + comp, axis=-1))


def mdn_act(o, params: MdnParams, mode: str = "mean", rng=None):
    """Action and component index; ``mean`` picks the heaviest component (lowest index on ties)."""
    cfg = params.config
    x, single = _batch(o, cfg.input_dim, "mdn_act")
    log_w, mean, var = mdn_heads(x, params)
    idx = np.arange(len(log_w))
    if mode == "mean":
        c = np.argmax(log_w, axis=-1)
        u = mean[idx, c]
    elif mode == "sample":
        rng = np.random.default_rng(rng)
        w = np.exp(log_w)
        c = (rng.random((len(w), 1)) > np.cumsum(w, axis=-1)).sum(axis=-1)
        c = np.minimum(c, cfg.num_components - 1)
        u = mean[idx, c] + np.sqrt(var[idx, c]) * rng.standard_normal(mean[idx, c].shape)
    else:
        raise ContractError("mode must be 'mean' or 'sample'")
    return (u[0], int(c[0])) if single else (u, c)


def mdn_params_from_model(params) -> MdnParams:
    """View the switcher and free-mean head of an ablated model (no feedback structure) as an MDN on ``z``."""
    cfg = params.config
    if cfg.feedback_structure:
        raise ConfigError("only the free-mean ablation has an MDN head")
    p = params.arrays
    mdn_cfg = MdnConfig(cfg.latent_dim, cfg.action_dim, cfg.num_skills, (cfg.switcher_hidden,), cfg.var_floor)
    arrays = {
        "trunk.W0": p["sw.W0"],
        "trunk.b0": p["sw.b0"],
        "head.Wl": p["sw.Wl"],
        "head.bl": p["sw.bl"],
        "head.Wmu": p["sw.Wmu"],
        "head.bmu": p["sw.bmu"],
        "head.Wn": p["sw.Wn"],
        "head.bn": p["sw.bn"],
    }
    return MdnParams(mdn_cfg, arrays)


# -- training ----------------------------------------------------------------------------


def _fit(loss_fn, params, dataset: Sequence[Trajectory], history: int, train_config: TrainConfig, rng):
    o_all, u_all = pairs_from_dataset(dataset, history)
    arrays = params.arrays
    state = AdamState()
    n = len(o_all)
    losses = []
    for _ in range(train_config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, train_config.batch_size):
            idx = order[lo : lo + train_config.batch_size]
            tape = Tape()
            vp = dataclasses.replace(params, arrays=tape.leaves_from(arrays))
            loss = loss_fn(o_all[idx], u_all[idx], vp)
            grads, _ = clip_by_global_norm(tape.backward(loss), train_config.clip_norm)
            arrays, state = adam_step(arrays, grads, state, train_config)
            total += float(loss.value) * len(idx)
        losses.append(total / n)
    return dataclasses.replace(params, arrays=arrays), losses


def fit_bc(dataset, train_config: TrainConfig, history: int = 1, hidden=(256, 256)):
    """Train a behaviour-cloning MLP; returns ``(BcParams, per-epoch losses)``."""
    rng = np.random.default_rng(train_config.seed)
    o_dim, a_dim = dataset[0].obs.shape[1] * history, dataset[0].actions.shape[1]
    params = init_bc(BcConfig(o_dim, a_dim, tuple(hidden)), rng)
    return _fit(bc_loss, params, dataset, history, train_config, rng)


def fit_mdn(dataset, num_components: int, train_config: TrainConfig, history: int = 1, hidden=(64, 64)):
    """Train a standalone MDN on observations; returns ``(MdnParams, per-epoch losses)``."""
    rng = np.random.default_rng(train_config.seed)
    o_dim, a_dim = dataset[0].obs.shape[1] * history, dataset[0].actions.shape[1]
    params = init_mdn(MdnConfig(o_dim, a_dim, num_components, tuple(hidden)), rng)
    return _fit(mdn_loss, params, dataset, history, train_config, rng)


def bc_policy(params: BcParams):
    def step(inputs, rng):
        u = bc_predict(inputs, params)
        return u, None, np.zeros(len(u), dtype=np.int64)

    return step


def mdn_policy(params: MdnParams, mode: str = "mean"):
    def step(inputs, rng):
        u, c = mdn_act(inputs, params, mode, rng)
        return u, None, c

    return step


# -- checkpoints ---------------------------------------------------------------------------


def _config_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d


def save_baseline(path, params) -> None:
    kind = "bc" if isinstance(params, BcParams) else "mdn"
    save_checkpoint(path, kind, _config_dict(params.config), params.arrays)


def load_baseline(path):
    doc = load_checkpoint(path)
    if doc["kind"] not in ("bc", "mdn"):
        raise ConfigError(f"{path}: not a baseline checkpoint (kind {doc['kind']!r})")
    cfg = dict(doc["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    if doc["kind"] == "bc":
        return BcParams(BcConfig(**cfg), doc["params"])
    return MdnParams(MdnConfig(**cfg), doc["params"])

