"""Evaluation metrics: success, robustness to observation noise, skill usage,
segmentation against ground truth, Fréchet deviation and closed-loop stability.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numba import njit
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, ShapeError
from .model import ModelParams, controller_bank, encode, posterior_skill
from .numcore import eigvals
from .simenv import (
    HybridTaskSpec,
    RolloutResult,
    Trajectory,
    model_policy,
    rollout_batch,
    sample_starts,
    stack_history,
)

DEFAULT_NOISE_SCALES = (0.0, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 3.0)

__all__ = [
    "DEFAULT_NOISE_SCALES",
    "RobustnessCurve",
    "SkillStats",
    "SkillStability",
    "StabilityReport",
    "success_rate",
    "robustness_auc",
    "robustness_curve",
    "skill_stats",
    "segmentation_accuracy",
    "segment_dataset",
    "frechet_distance",
    "latent_transitions",
    "stability_report",
    "frechet_noise_sweep",
    "write_eval_report",
]


def success_rate(results: Sequence[RolloutResult]) -> float:
    if len(results) == 0:
        raise ContractError("success rate of an empty result set")
    return sum(bool(r.success) for r in results) / len(results)


# -- robustness -----------------------------------------------------------------------


@dataclass(frozen=True)
class RobustnessCurve:
    noise_scales: tuple[float, ...]
    success_rates: tuple[float, ...]
    auc: float


def robustness_auc(scales, rates) -> float:
    """Trapezoid area under success-vs-scale, divided by the scale range.

    A single-point curve has no range; its AUC is defined as that rate.
    """
    scales = np.asarray(scales, dtype=np.float64)
    rates = np.asarray(rates, dtype=np.float64)
    if scales.shape != rates.shape or scales.size == 0:
        raise ContractError("scales and rates must be nonempty and of equal length")
    if np.any(np.diff(scales) <= 0):
        raise ContractError("noise scales must be strictly increasing")
    if scales.size == 1:
        return float(rates[0])
    area = np.sum(0.5 * (rates[1:] + rates[:-1]) * np.diff(scales))
    return float(area / (scales[-1] - scales[0]))


def robustness_curve(
    policy,
    spec: HybridTaskSpec,
    train_std,
    scales=DEFAULT_NOISE_SCALES,
    episodes: int = 50,
    seed: int = 0,
    mode: str = "mean",
) -> RobustnessCurve:
    """Success rate at each observation-noise scale over ``episodes`` rollouts.

    ``policy`` is a :class:`ModelParams` or a batched policy callable (see
    :func:`slfc.simenv.rollout_batch`).  Every scale reuses the same start
    states so curves of different models are directly comparable.
    """
    if episodes < 1:
        raise ContractError("episodes must be >= 1")
    scales = tuple(float(s) for s in scales)
    if not scales or any(b <= a for a, b in zip(scales, scales[1:])):
        raise ContractError("scales must be nonempty and strictly increasing")
    step = model_policy(policy, mode) if isinstance(policy, ModelParams) else policy
    starts = sample_starts(spec, episodes, np.random.default_rng(seed))
    rates = []
    for k, s in enumerate(scales):
        results = rollout_batch(step, spec, starts, [seed, k], obs_noise=s, train_std=train_std)
        rates.append(success_rate(results))
    return RobustnessCurve(scales, tuple(rates), robustness_auc(scales, rates))


# -- skills ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SkillStats:
    num_used_skills: int
    avg_skill_duration: float
    avg_transition_fraction: float


def _run_lengths(seq: np.ndarray) -> np.ndarray:
    change = np.flatnonzero(np.diff(seq)) + 1
    bounds = np.concatenate([[0], change, [len(seq)]])
    return np.diff(bounds)


def skill_stats(sequences: Sequence, num_skills: int) -> SkillStats:
    """Skill usage over executed index sequences (0-based indices).

    Per sequence, the duration fraction is the mean over maximal constant
    runs of ``run_length / T``; the transition fraction is its complement.
    """
    if len(sequences) == 0:
        raise ContractError("no sequences")
    used = set()
    durations = []
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size == 0:
            raise ContractError("empty skill sequence")
        if seq.min() < 0 or seq.max() >= num_skills:
            raise ContractError(f"skill index outside [0, {num_skills})")
        used.update(np.unique(seq).tolist())
        durations.append(np.mean(_run_lengths(seq) / seq.size))
    d = float(np.mean(durations))
    return SkillStats(len(used), d, 1.0 - d)


def segmentation_accuracy(predicted, truth, num_skills: int | None = None, num_true: int | None = None) -> float:
    """Per-step agreement after the best one-to-one relabeling of predicted skills."""
    predicted = np.asarray(predicted, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if predicted.shape != truth.shape:
        raise ShapeError("predicted and true label sequences differ in length")
    if predicted.size == 0:
        raise ContractError("empty label sequences")
    C = num_skills or int(predicted.max()) + 1
    K = num_true or int(truth.max()) + 1
    counts = np.zeros((C, K))
    np.add.at(counts, (predicted, truth), 1.0)
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return float(counts[rows, cols].sum() / predicted.size)


def segment_dataset(params: ModelParams, dataset: Sequence[Trajectory]) -> list[np.ndarray]:
    """Most probable skill per step, from the posterior at the encoder mean."""
    h = params.config.history
    out = []
    for t in dataset:
        z = encode(stack_history(t.obs, h), params).mean
        out.append(np.asarray(posterior_skill(z, t.actions, params).argmax(), dtype=np.int64))
    return out


# -- Fréchet distance ---------------------------------------------------------------------


@njit(cache=True)
def _dfd(dist):
    n, m = dist.shape
    ca = np.empty((n, m))
    ca[0, 0] = dist[0, 0]
    for i in range(1, n):
        ca[i, 0] = max(ca[i - 1, 0], dist[i, 0])
    for j in range(1, m):
        ca[0, j] = max(ca[0, j - 1], dist[0, j])
    for i in range(1, n):
        for j in range(1, m):
            ca[i, j] = max(min(ca[i - 1, j], ca[i - 1, j - 1], ca[i, j - 1]), dist[i, j])
    return ca[n - 1, m - 1]


def frechet_distance(path_a, path_b) -> float:
    """Discrete Fréchet distance with Euclidean ground metric."""
    a = np.asarray(path_a, dtype=np.float64)
    b = np.asarray(path_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise ContractError("Fréchet distance of an empty path")
    if a.shape[1] != b.shape[1]:
        raise ShapeError("paths live in spaces of different dimension")
    dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float(_dfd(dist))


def nearest_frechet(path, references: Sequence[np.ndarray]) -> float:
    """Fréchet distance from ``path`` to the closest of ``references``."""
    best = np.inf
    for ref in references:
        d = frechet_distance(path, ref)
        if d < best:
            best = d
    return float(best)


# -- stability ----------------------------------------------------------------------------


@dataclass
class SkillStability:
    skill: int
    n_samples: int
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    closed_loop: np.ndarray | None = None  # A - B K
    eigenvalues: np.ndarray | None = None
    spectral_radius: float | None = None
    residual: float | None = None
    stable: bool | None = None
    closed_loop_plus: np.ndarray | None = None  # A + B K, sign folded into the gain
    eigenvalues_plus: np.ndarray | None = None
    status: str = "ok"


@dataclass
class StabilityReport:
    skills: list = field(default_factory=list)

    def by_skill(self, c: int) -> SkillStability:
        for s in self.skills:
            if s.skill == c:
                return s
        raise KeyError(c)


def latent_transitions(params: ModelParams, dataset: Sequence[Trajectory]) -> dict[int, tuple]:
    """Encoder-mean transitions ``(z_t, u_t, z_{t+1})`` grouped by most probable skill at ``t``."""
    h = params.config.history
    groups: dict[int, list] = {}
    for traj in dataset:
        if len(traj) < 2:
            continue
        z = encode(stack_history(traj.obs, h), params).mean
        c = posterior_skill(z, traj.actions, params).argmax()
        for t in range(len(traj) - 1):
            groups.setdefault(int(c[t]), []).append((z[t], traj.actions[t], z[t + 1]))
    return {
        k: (np.array([r[0] for r in v]), np.array([r[1] for r in v]), np.array([r[2] for r in v]))
        for k, v in sorted(groups.items())
    }


def stability_report(groups: Mapping[int, tuple], gains) -> StabilityReport:
    """Fit ``z' = A z + B u`` per skill by least squares and analyse ``A - B K``.

    ``groups`` maps a skill index to arrays ``(Z, U, Z_next)``; ``gains`` is
    the ``(C, A, S)`` gain bank.  Groups with fewer than ``S + A`` samples
    are marked ``insufficient data`` and not fitted.
    """
    gains = np.asarray(gains, dtype=np.float64)
    report = StabilityReport()
    for c, (Z, U, Zn) in sorted(groups.items()):
        Z, U, Zn = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (Z, U, Zn))
        S, A = Z.shape[1], U.shape[1]
        n = Z.shape[0]
        if n < S + A:
            report.skills.append(SkillStability(c, n, status="insufficient data"))
            continue
        X = np.hstack([Z, U])
        coef, *_ = np.linalg.lstsq(X, Zn, rcond=None)
        A_fit, B_fit = coef[:S].T, coef[S:].T
        residual = float(np.max(np.abs(X @ coef - Zn)))
        K = gains[c]
        closed = A_fit - B_fit @ K
        ev = eigvals(closed)
        plus = A_fit + B_fit @ K
        radius = float(np.max(np.abs(ev)))
        report.skills.append(
            SkillStability(
                c, n, A_fit, B_fit, closed, ev, radius, residual, radius < 1.0, plus, eigvals(plus)
            )
        )
    return report


# -- Fréchet sweeps -------------------------------------------------------------------------


def frechet_noise_sweep(
    variants: Mapping[str, ModelParams],
    spec: HybridTaskSpec,
    dataset: Sequence[Trajectory],
    train_std,
    obs_scales=(),
    process_scales=(),
    episodes: int = 10,
    seed: int = 0,
    mode: str = "mean",
) -> list[dict]:
    """Mean Fréchet distance between rollout latent paths and the nearest training latent path.

    One row per (variant, noise kind, scale).  Each variant is compared
    against training paths encoded by that same variant.  Starts are the
    first ``episodes`` training starts.
    """
    starts = np.array([t.states[0] if t.states is not None else t.obs[0] for t in dataset[:episodes]])
    rows = []
    for name, params in variants.items():
        h = params.config.history
        refs = [encode(stack_history(t.obs, h), params).mean for t in dataset]
        step = model_policy(params, mode)
        for kind, scales in (("observation", obs_scales), ("process", process_scales)):
            for k, s in enumerate(scales):
                kw = {"obs_noise": s, "train_std": train_std} if kind == "observation" else {"process_noise": s}
                results = rollout_batch(step, spec, starts, [seed, k, kind == "process"], **kw)
                dists = [nearest_frechet(r.latents, refs) for r in results if len(r.latents)]
                rows.append({"variant": name, "noise_kind": kind, "scale": float(s), "distance": float(np.mean(dists))})
    return rows


# -- export -----------------------------------------------------------------------------------


def _fmt(x) -> str:
    return f"{float(x):.9g}"


def write_eval_report(
    out_dir,
    curve: RobustnessCurve,
    stats: SkillStats,
    stability: StabilityReport,
    frechet_rows: Sequence[Mapping],
    summary: Mapping,
) -> None:
    """Write curve.csv, skills.csv, stability.csv, frechet.csv and summary.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def writer(name, header, rows):
        with open(out / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    writer("curve.csv", ["noise_scale", "success_rate"], [[_fmt(s), _fmt(r)] for s, r in zip(curve.noise_scales, curve.success_rates)])
    writer(
        "skills.csv",
        ["num_used_skills", "avg_skill_duration", "avg_transition_fraction"],
        [[stats.num_used_skills, _fmt(stats.avg_skill_duration), _fmt(stats.avg_transition_fraction)]],
    )
    stab_rows = []
    for s in stability.skills:
        if s.eigenvalues is None:
            stab_rows.append([s.skill + 1, "", "", "", s.status])
            continue
        for ev in s.eigenvalues:
            stab_rows.append([s.skill + 1, _fmt(ev.real), _fmt(ev.imag), _fmt(s.spectral_radius), s.status])
    writer("stability.csv", ["skill", "eig_re", "eig_im", "radius", "status"], stab_rows)
    writer(
        "frechet.csv",
        ["variant", "noise_kind", "scale", "distance"],
        [[r["variant"], r["noise_kind"], _fmt(r["scale"]), _fmt(r["distance"])] for r in frechet_rows],
    )
    (out / "summary.json").write_text(json.dumps(dict(summary), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def closed_loop_gains(params: ModelParams) -> np.ndarray:
    return controller_bank(params)[1]
