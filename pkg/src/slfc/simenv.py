"""Synthetic point-mass tasks with ground-truth skills.

A task is a sequence of goals ``g_1 .. g_K`` in a ``d``-dimensional state
space.  Demonstrations start near ``start_center`` and run skill ``i``,
``u = G_i (g_i - x) + noise``, under displacement dynamics ``x' = x + u``
until the state is within ``switch_radius`` of ``g_i``; then skill ``i+1``
takes over.  Observations are the state passed through an invertible
elementwise map.

Execution of a learned model follows the usual loop: encode the current
observation, pick the most probable skill, apply that skill's feedback
law in latent space, step the environment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .model import ModelParams, encode, skill_heads

__all__ = [
    "HybridTaskSpec",
    "Trajectory",
    "RolloutResult",
    "smoke_spec",
    "writing_spec",
    "generate_dataset",
    "env_step",
    "observe",
    "stack_history",
    "pairs_from_dataset",
    "observation_std",
    "add_observation_noise",
    "sample_starts",
    "rollout",
    "rollout_batch",
    "save_dataset",
    "load_dataset",
]

OBS_MAPS = ("identity", "tanh-warp")


@dataclass(frozen=True)
class HybridTaskSpec:
    goals: np.ndarray  # (K, d) true goals, executed in order
    gains: np.ndarray  # (K, d, d) true feedback gains
    switch_radius: float = 0.05
    process_noise: float = 0.01
    obs_map: str = "identity"
    horizon: int = 60
    success_radius: float = 0.1
    start_center: np.ndarray | None = None
    start_spread: float = 0.25
    history: int = 1
    name: str = "task"

    def __post_init__(self):
        goals = np.atleast_2d(np.asarray(self.goals, dtype=np.float64))
        gains = np.asarray(self.gains, dtype=np.float64)
        k, d = goals.shape
        if gains.shape != (k, d, d):
            raise ConfigError(f"gains shape {gains.shape} != {(k, d, d)}")
        for i, G in enumerate(gains):
            rho = np.max(np.abs(np.linalg.eigvals(np.eye(d) - G)))
            if not rho < 1.0:
                raise ConfigError(f"skill {i}: spectral radius of I - G is {rho:.3f}; demonstrations would not converge")
        if not (self.switch_radius > 0 and self.success_radius > 0):
            raise ConfigError("switch_radius and success_radius must be > 0")
        if self.obs_map not in OBS_MAPS:
            raise ConfigError(f"obs_map must be one of {OBS_MAPS}")
        if self.horizon < 0 or self.history < 1 or self.process_noise < 0:
            raise ConfigError("horizon >= 0, history >= 1 and process_noise >= 0 required")
        center = np.zeros(d) if self.start_center is None else np.asarray(self.start_center, dtype=np.float64)
        object.__setattr__(self, "goals", goals)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "start_center", center)

    @property
    def state_dim(self) -> int:
        return self.goals.shape[1]

    @property
    def num_skills(self) -> int:
        return self.goals.shape[0]

    def to_dict(self) -> dict:
        return {
            "goals": self.goals.tolist(),
            "gains": self.gains.tolist(),
            "switch_radius": self.switch_radius,
            "process_noise": self.process_noise,
            "obs_map": self.obs_map,
            "horizon": self.horizon,
            "success_radius": self.success_radius,
            "start_center": self.start_center.tolist(),
            "start_spread": self.start_spread,
            "history": self.history,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d) -> "HybridTaskSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown task keys: {sorted(unknown)}")
        return cls(**d)


def smoke_spec(**overrides) -> HybridTaskSpec:
    """Three-skill planar reaching task used for smoke tests and acceptance."""
    base = dict(
        goals=np.array([[0.5, -1.0], [0.5, 0.5], [-1.0, 0.5]]),
        gains=np.stack([0.30 * np.eye(2), 0.35 * np.eye(2), 0.25 * np.eye(2)]),
        switch_radius=0.05,
        process_noise=0.01,
        obs_map="identity",
        horizon=60,
        success_radius=0.1,
        start_center=np.array([-1.0, -1.0]),
        start_spread=0.25,
        history=1,
        name="push",
    )
    base.update(overrides)
    return HybridTaskSpec(**base)


def writing_spec(**overrides) -> HybridTaskSpec:
    """Pen-stroke-like task: four strokes, warped observations, 4-step history."""
    rot = np.array([[0.9, -0.15], [0.15, 0.9]])
    base = dict(
        goals=np.array([[0.0, 1.0], [0.6, 0.2], [0.0, -0.6], [-0.6, 0.2]]),
        gains=np.stack([0.3 * np.eye(2), 0.4 * rot, 0.3 * np.eye(2), 0.4 * rot.T]),
        switch_radius=0.05,
        process_noise=0.005,
        obs_map="tanh-warp",
        horizon=80,
        success_radius=0.1,
        start_center=np.array([-0.6, 0.9]),
        start_spread=0.1,
        history=4,
        name="writing",
    )
    base.update(overrides)
    return HybridTaskSpec(**base)


@dataclass
class Trajectory:
    obs: np.ndarray  # (T, O)
    actions: np.ndarray  # (T, A)
    true_skills: np.ndarray | None = None  # (T,) 0-based
    task_id: str | None = None
    states: np.ndarray | None = field(default=None, repr=False)  # (T, d), not serialized

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.obs.ndim != 2 or self.actions.ndim != 2:
            raise ShapeError("obs and actions must be 2-D (time, dim)")
        if self.obs.shape[0] != self.actions.shape[0]:
            raise ShapeError("obs and actions must share the time axis")
        if self.true_skills is not None:
            self.true_skills = np.asarray(self.true_skills, dtype=np.int64)
            if self.true_skills.shape != (len(self.obs),):
                raise ShapeError("one skill label per time step required")

    def __len__(self):
        return self.obs.shape[0]


@dataclass
class RolloutResult:
    trajectory: Trajectory
    latents: np.ndarray  # (T, S); empty for policies without a latent state
    skills: np.ndarray  # (T,) 0-based
    success: bool
    steps_to_success: int | None
    diagnostic: str = ""


# -- dynamics -------------------------------------------------------------------------


def observe(x, spec: HybridTaskSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.tanh(x) if spec.obs_map == "tanh-warp" else x.copy()


def env_step(x, u, spec: HybridTaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Displacement dynamics ``x' = x + u``; returns ``(x', observe(x'))``."""
    x_next = np.asarray(x, dtype=np.float64) + np.asarray(u, dtype=np.float64)
    return x_next, observe(x_next, spec)


def sample_starts(spec: HybridTaskSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return spec.start_center + rng.uniform(-spec.start_spread, spec.start_spread, size=(n, spec.state_dim))


def demonstrate(spec: HybridTaskSpec, x0, rng: np.random.Generator, task_id: str | None = None) -> Trajectory:
    """One expert demonstration from ``x0``.

    The active skill acts at least once; after each step, reaching its
    switch radius hands control to the next skill.  The demo ends once the
    last goal is reached or after ``horizon`` steps.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    skill = 0
    xs, us, labels = [], [], []
    for _ in range(spec.horizon):
        u = spec.gains[skill] @ (spec.goals[skill] - x)
        if spec.process_noise > 0:
            u = u + spec.process_noise * rng.standard_normal(spec.state_dim)
        xs.append(x)
        us.append(u)
        labels.append(skill)
        x = x + u
        if np.linalg.norm(x - spec.goals[skill]) < spec.switch_radius:
            skill += 1
            if skill == spec.num_skills:
                break
    states = np.array(xs).reshape(-1, spec.state_dim)
    return Trajectory(
        obs=observe(states, spec),
        actions=np.array(us).reshape(-1, spec.state_dim),
        true_skills=np.array(labels, dtype=np.int64),
        task_id=task_id or spec.name,
        states=states,
    )


def generate_dataset(spec: HybridTaskSpec, n_demos: int, seed: int) -> list[Trajectory]:
    """``n_demos`` demonstrations; bit-identical for identical ``(spec, n_demos, seed)``."""
    if n_demos < 1:
        raise ContractError("n_demos must be >= 1")
    rng = np.random.default_rng(seed)
    starts = sample_starts(spec, n_demos, rng)
    return [demonstrate(spec, x0, rng) for x0 in starts]


# -- model inputs -----------------------------------------------------------------------


def stack_history(obs: np.ndarray, history: int) -> np.ndarray:
    """Concatenate each observation with its ``history - 1`` predecessors (oldest first).

    The first observation is repeated to pad the start of the sequence.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if history == 1:
        return obs
    idx = np.arange(len(obs))[:, None] + np.arange(-history + 1, 1)[None, :]
    return obs[np.clip(idx, 0, None)].reshape(len(obs), -1)


def pairs_from_dataset(dataset: Sequence[Trajectory], history: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """All (encoder input, action) pairs of a dataset, trajectory-major."""
    o = np.concatenate([stack_history(t.obs, history) for t in dataset])
    u = np.concatenate([t.actions for t in dataset])
    return o, u


def observation_std(dataset: Sequence[Trajectory]) -> np.ndarray:
    """Per-dimension std of raw observations pooled over trajectories and time."""
    return np.concatenate([t.obs for t in dataset]).std(axis=0)


def add_observation_noise(obs, scale: float, train_std, rng: np.random.Generator) -> np.ndarray:
    """``obs + scale * train_std * n`` with ``n ~ N(0, I)``; ``rng`` may be a seed."""
    if scale < 0:
        raise ContractError("noise scale must be nonnegative")
    obs = np.asarray(obs, dtype=np.float64)
    if scale == 0:
        return obs.copy()
    rng = np.random.default_rng(rng)
    return obs + scale * np.asarray(train_std) * rng.standard_normal(obs.shape)


# -- execution -------------------------------------------------------------------------------


Policy = Callable[[np.ndarray, np.random.Generator], tuple]


def model_policy(params: ModelParams, mode: str = "mean") -> Policy:
    """Batched execution step of a trained model: encode, switch by argmax, apply the skill.

    Returns ``(u, z, c)`` for a batch of encoder inputs.
    """
    if mode not in ("mean", "sample"):
        raise ContractError("mode must be 'mean' or 'sample'")

    def step(inputs, rng):
        q = encode(inputs, params)
        z = q.mean if mode == "mean" else q.mean + np.sqrt(q.var) * rng.standard_normal(q.mean.shape)
        heads = skill_heads(z, params)
        c = np.argmax(heads.log_prior, axis=-1)
        u = heads.action_mean[np.arange(len(c)), c]
        return u, z, c

    return step


def rollout_batch(
    policy: Policy,
    spec: HybridTaskSpec,
    starts: np.ndarray,
    seed: int | np.random.Generator,
    obs_noise: float = 0.0,
    train_std=None,
    process_noise: float = 0.0,
) -> list[RolloutResult]:
    """Run episodes from every start in lock-step until success or the horizon.

    ``obs_noise`` scales ``train_std`` into Gaussian noise added to every
    observation before the policy sees it; ``process_noise`` is the std of
    Gaussian noise added to the state after every step.
    """
    rng = np.random.default_rng(seed)
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    E = starts.shape[0]
    if obs_noise > 0 and train_std is None:
        raise ContractError("observation noise needs the training std")
    std = np.zeros(spec.state_dim) if train_std is None else np.asarray(train_std)
    x = starts.copy()
    active = np.ones(E, dtype=bool)
    stop_at = np.full(E, -1)
    succeeded = np.zeros(E, dtype=bool)
    diag = [""] * E
    xs, os_, us, zs, cs = [], [], [], [], []
    final_goal = spec.goals[-1]
    for t in range(spec.horizon):
        o = observe(x, spec)
        if obs_noise > 0:
            o = add_observation_noise(o, obs_noise, std, rng)
        os_.append(o)
        window = os_[max(0, t - spec.history + 1) :]
        window = [window[0]] * (spec.history - len(window)) + window
        u, z, c = policy(np.concatenate(window, axis=-1), rng)
        bad = active & ~np.all(np.isfinite(u), axis=-1)
        for i in np.flatnonzero(bad):
            diag[i] = f"non-finite action at step {t}"
        stop_at[bad] = t + 1
        active &= ~bad
        u = np.where(active[:, None], u, 0.0)
        xs.append(x.copy())
        us.append(u)
        zs.append(z)
        cs.append(c)
        x = x + u
        if process_noise > 0:
            x = x + process_noise * rng.standard_normal(x.shape) * active[:, None]
        hit = active & (np.linalg.norm(x - final_goal, axis=-1) < spec.success_radius)
        stop_at[hit] = t + 1
        succeeded |= hit
        active &= ~hit
        if not active.any():
            break
    T_run = len(xs)
    stop_at[stop_at < 0] = T_run
    O, A = spec.state_dim, spec.state_dim

    def stacked(seq, width):
        return np.stack(seq, axis=1) if seq else np.zeros((E, 0, width))

    X, Obs, U = stacked(xs, O), stacked(os_, O), stacked(us, A)
    Z = stacked(zs, 0) if zs and zs[0] is not None else np.zeros((E, T_run, 0))
    Cs = np.stack(cs, axis=1) if cs else np.zeros((E, 0), dtype=np.int64)
    results = []
    for i in range(E):
        n = int(stop_at[i])
        traj = Trajectory(obs=Obs[i, :n], actions=U[i, :n], task_id=spec.name, states=X[i, :n])
        results.append(
            RolloutResult(
                trajectory=traj,
                latents=Z[i, :n],
                skills=Cs[i, :n].astype(np.int64),
                success=bool(succeeded[i]),
                steps_to_success=n if succeeded[i] else None,
                diagnostic=diag[i],
            )
        )
    return results


def rollout(
    params: ModelParams,
    spec: HybridTaskSpec,
    mode: str = "mean",
    seed: int = 0,
    start=None,
    obs_noise: float = 0.0,
    train_std=None,
    process_noise: float = 0.0,
) -> RolloutResult:
    """Closed-loop execution of a trained model for one episode."""
    if params.config.obs_dim != spec.state_dim or params.config.history != spec.history:
        raise ConfigError("model observation layout does not match the task")
    rng = np.random.default_rng(seed)
    if start is None:
        start = sample_starts(spec, 1, rng)[0]
    return rollout_batch(
        model_policy(params, mode), spec, np.asarray(start)[None], rng, obs_noise, train_std, process_noise
    )[0]


# -- dataset files ----------------------------------------------------------------------------


def _traj_to_json(t: Trajectory) -> dict:
    d = {"task_id": t.task_id or "", "obs": t.obs.tolist(), "actions": t.actions.tolist()}
    if t.true_skills is not None:
        d["skills"] = [int(s) + 1 for s in t.true_skills]
    return d


def save_dataset(dataset: Iterable[Trajectory], path) -> None:
    """Write JSON Lines, one trajectory per line; skill labels are 1-based on disk."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in dataset:
            fh.write(json.dumps(_traj_to_json(t), separators=(",", ":")))
            fh.write("\n")


def load_dataset(path) -> list[Trajectory]:
    out = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                skills = d.get("skills")
                out.append(
                    Trajectory(
                        obs=np.array(d["obs"], dtype=np.float64),
                        actions=np.array(d["actions"], dtype=np.float64),
                        true_skills=None if skills is None else np.array(skills, dtype=np.int64) - 1,
                        task_id=d.get("task_id"),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed trajectory ({exc})") from exc
    if not out:
        raise ConfigError(f"{path}: empty dataset")
    return out
