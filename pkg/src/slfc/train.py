"""Adam optimization of the ELBO over shuffled minibatches of (o, u) pairs."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .checkpoint import decode_arrays, encode_arrays, load_model, save_model
from .elbo import ElboBreakdown, LossWeights, loss_and_grad
from .errors import ConfigError, NumericalAbort
from .model import ModelConfig, ModelParams, init_params
from .simenv import Trajectory, pairs_from_dataset

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainLog", "AdamState", "adam_step", "clip_by_global_norm", "fit", "write_trainlog_csv"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    checkpoint_interval: int = 0  # epochs between checkpoints; 0 writes only the final one
    clip_norm: float = 10.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.checkpoint_interval < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0, checkpoint_interval >= 0 required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"t": self.t, "m": encode_arrays(self.m), "v": encode_arrays(self.v)}

    @classmethod
    def from_json(cls, d) -> "AdamState":
        return cls(int(d["t"]), decode_arrays(d["m"]), decode_arrays(d["v"]))


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    breakdowns: list = field(default_factory=list)  # ElboBreakdown per epoch (mean over batches)
    wall_clock: list = field(default_factory=list)
    param_norms: list = field(default_factory=list)

    def append(self, epoch, breakdown, seconds, norm):
        self.epochs.append(epoch)
        self.breakdowns.append(breakdown)
        self.wall_clock.append(seconds)
        self.param_norms.append(norm)

    def totals(self) -> np.ndarray:
        return np.array([b.total for b in self.breakdowns])

    def to_json(self) -> dict:
        # wall-clock is left out so that resumed runs serialize identically
        return {
            "epochs": list(self.epochs),
            "rows": [list(b.as_row()) for b in self.breakdowns],
            "param_norms": list(self.param_norms),
        }

    @classmethod
    def from_json(cls, d) -> "TrainLog":
        out = cls()
        for e, row, n in zip(d["epochs"], d["rows"], d["param_norms"]):
            out.append(e, ElboBreakdown(*row), float("nan"), n)
        return out


def adam_step(arrays: Mapping, grads: Mapping, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update. Returns ``(new_arrays, new_state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    new, m_new, v_new = {}, {}, {}
    for name, x in arrays.items():
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new[name] = x - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        m_new[name], v_new[name] = np.asarray(m, dtype=np.float64), np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(new[name])):
            raise NumericalAbort(f"update produced non-finite values in {name!r} at step {t}")
    return new, AdamState(t, m_new, v_new)


def clip_by_global_norm(grads: Mapping, max_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


class _FlatAdam:
    """Adam over one contiguous buffer; parameters are views into it.

    Arithmetic is the same elementwise recurrence as :func:`adam_step`,
    minus the per-parameter Python loop.
    """

    def __init__(self, arrays: Mapping, state: AdamState, config: TrainConfig):
        self.names = sorted(arrays)
        self.shapes = [np.shape(arrays[k]) for k in self.names]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.theta = self._pack(arrays)
        self.m = self._pack(state.m) if state.m else np.zeros_like(self.theta)
        self.v = self._pack(state.v) if state.v else np.zeros_like(self.theta)
        self.t = state.t
        self.config = config
        self.arrays = self._views(self.theta)

    def _pack(self, d):
        return np.concatenate([np.asarray(d[k], dtype=np.float64).ravel() for k in self.names])

    def _views(self, flat):
        return {
            k: flat[a:b].reshape(shape)
            for k, a, b, shape in zip(self.names, self.offsets[:-1], self.offsets[1:], self.shapes)
        }

    def _name_at(self, mask):
        i = int(np.flatnonzero(mask)[0])
        return self.names[int(np.searchsorted(self.offsets, i, side="right")) - 1]

    def step(self, grads: Mapping) -> float:
        cfg = self.config
        g = self._pack(grads)
        bad = ~np.isfinite(g)
        if bad.any():
            raise NumericalAbort(f"non-finite gradient for parameter {self._name_at(bad)!r} at step {self.t + 1}")
        norm = float(np.sqrt(g @ g))
        if cfg.clip_norm > 0 and norm > cfg.clip_norm:
            g = g * (cfg.clip_norm / norm)
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * g * g
        m_hat = self.m / (1.0 - b1**self.t)
        v_hat = self.v / (1.0 - b2**self.t)
        self.theta -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        bad = ~np.isfinite(self.theta)
        if bad.any():
            raise NumericalAbort(f"update produced non-finite values in {self._name_at(bad)!r} at step {self.t}")
        return norm

    def snapshot(self) -> tuple[dict, AdamState]:
        arrays = {k: v.copy() for k, v in self.arrays.items()}
        m = {k: v.copy() for k, v in self._views(self.m).items()}
        v = {k: x.copy() for k, x in self._views(self.v).items()}
        return arrays, AdamState(self.t, m, v)


def check_dataset(dataset: Sequence[Trajectory], config: ModelConfig) -> None:
    if not dataset:
        raise ConfigError("empty dataset")
    for i, t in enumerate(dataset):
        if t.obs.shape[1] != config.obs_dim or t.actions.shape[1] != config.action_dim:
            raise ConfigError(
                f"trajectory {i}: obs dim {t.obs.shape[1]} / action dim {t.actions.shape[1]} "
                f"incompatible with model ({config.obs_dim}, {config.action_dim})"
            )


def _state_to_json(epoch, state, rng, trainlog) -> dict:
    return {"epoch": epoch, "adam": state.to_json(), "rng": rng.bit_generator.state, "log": trainlog.to_json()}


def fit(
    dataset: Sequence[Trajectory],
    model_config: ModelConfig,
    train_config: TrainConfig,
    checkpoint_path=None,
    resume_from=None,
    weights: LossWeights | None = None,
    on_epoch: Callable[[int, ElboBreakdown], None] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Train a model on a demonstration dataset.

    Each epoch visits every (trajectory, t) pair once in a seeded random
    order.  With ``checkpoint_path`` the state (parameters, Adam moments,
    RNG state and log) is written every ``checkpoint_interval`` epochs and
    at the end; ``resume_from`` continues such a run exactly.
    """
    check_dataset(dataset, model_config)
    o_all, u_all = pairs_from_dataset(dataset, model_config.history)
    weights = weights or LossWeights.for_config(model_config)
    cfg = train_config

    if resume_from is not None:
        params, ts = load_model(resume_from)
        if params.config != model_config:
            raise ConfigError("checkpoint model config differs from the requested one")
        if ts is None:
            raise ConfigError(f"{resume_from}: checkpoint carries no training state")
        rng = np.random.default_rng()
        rng.bit_generator.state = ts["rng"]
        state = AdamState.from_json(ts["adam"])
        trainlog = TrainLog.from_json(ts["log"])
        start_epoch = int(ts["epoch"])
    else:
        rng = np.random.default_rng(cfg.seed)
        params = init_params(model_config, rng)
        state = AdamState()
        trainlog = TrainLog()
        start_epoch = 0

    opt = _FlatAdam(params.arrays, state, cfg)
    live = params.with_arrays(opt.arrays)
    n = o_all.shape[0]
    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        count = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            noise = rng.standard_normal((len(idx), model_config.latent_dim))
            _, bd, grads = loss_and_grad(o_all[idx], u_all[idx], live, weights, noise=noise)
            opt.step(grads)
            sums += len(idx) * np.array(bd.as_row()[:4])
            count += len(idx)
        bd = ElboBreakdown.from_terms(*(sums / count))
        trainlog.append(epoch + 1, bd, time.perf_counter() - t0, float(np.sqrt(opt.theta @ opt.theta)))
        if on_epoch is not None:
            on_epoch(epoch + 1, bd)
        if checkpoint_path and cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            arrays, state = opt.snapshot()
            save_model(checkpoint_path, params.with_arrays(arrays), _state_to_json(epoch + 1, state, rng, trainlog))
    arrays, state = opt.snapshot()
    params = params.with_arrays(arrays)
    if checkpoint_path:
        save_model(checkpoint_path, params, _state_to_json(max(cfg.epochs, start_epoch), state, rng, trainlog))
    return params, trainlog


def write_trainlog_csv(trainlog: TrainLog, path) -> None:
    """CSV with columns epoch, recon_obs, recon_act, kl_z, kl_switch, total (9 significant digits)."""
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "recon_obs", "recon_act", "kl_z", "kl_switch", "total"])
        for e, b in zip(trainlog.epochs, trainlog.breakdowns):
            w.writerow([e, *(f"{x:.9g}" for x in b.as_row())])
