"""Command line interface: ``slfc gen | train | eval | segment | sweep``.

Every command reads an optional JSON run config (``--config``) with the
sections ``task``, ``gen``, ``model``, ``train`` and ``eval``.  Values come
from, in increasing priority: built-in defaults, the config file, the
``SLFC_SEED`` environment variable (seeds only), command-line flags.

Exit codes: 0 success, 2 configuration or schema error, 3 numerical abort,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

SECTIONS = ("task", "gen", "model", "train", "eval")
GEN_DEFAULTS = {"n_demos": 200, "seed": 0}
MODEL_DEFAULTS = {"latent_dim": 2, "num_skills": 5, "variant": "mdn_fb_sw"}
EVAL_DEFAULTS = {
    "episodes": 50,
    "scales": [0.0, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 3.0],
    "seed": 0,
    "mode": "mean",
    "frechet_episodes": 10,
    "frechet_obs_scales": [0.0, 0.5, 1.0],
    "frechet_process_scales": [0.0, 0.05, 0.1],
}
TRAIN_DEFAULTS = {"batch_size": 32, "epochs": 300}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    task: dict = field(default_factory=dict)
    gen: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})", EXIT_CONFIG) from exc
        if not isinstance(doc, dict):
            raise CliError(f"{path}: run config must be a JSON object", EXIT_CONFIG)
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise CliError(f"{path}: unknown config sections {sorted(unknown)}", EXIT_CONFIG)
        for k, v in doc.items():
            if not isinstance(v, dict):
                raise CliError(f"{path}: section {k!r} must be an object", EXIT_CONFIG)
        return cls(**{k: dict(v) for k, v in doc.items()})


def _check_keys(section: str, d: dict, allowed) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise CliError(f"unknown keys in {section!r}: {sorted(unknown)}", EXIT_CONFIG)


def _env_seed():
    raw = os.environ.get("SLFC_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise CliError(f"SLFC_SEED must be an integer, got {raw!r}", EXIT_CONFIG) from exc


def _merge(defaults: dict, file_values: dict, flags: dict, seed_key: str | None = None) -> dict:
    out = dict(defaults)
    out.update(file_values)
    env = _env_seed()
    if seed_key and env is not None:
        out[seed_key] = env
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


# -- section resolution -------------------------------------------------------------------


def _task_spec(cfg: RunConfig):
    from .simenv import HybridTaskSpec, smoke_spec, writing_spec

    d = dict(cfg.task)
    preset = d.pop("preset", "smoke")
    presets = {"smoke": smoke_spec, "writing": writing_spec}
    if preset not in presets:
        raise CliError(f"unknown task preset {preset!r}; choose from {sorted(presets)}", EXIT_CONFIG)
    base = presets[preset]().to_dict()
    _check_keys("task", d, base)
    base.update(d)
    return HybridTaskSpec.from_dict(base)


def _gen_settings(cfg: RunConfig, args) -> dict:
    _check_keys("gen", cfg.gen, GEN_DEFAULTS)
    flags = {"n_demos": getattr(args, "n_demos", None), "seed": getattr(args, "seed", None)}
    out = _merge(GEN_DEFAULTS, cfg.gen, flags, "seed")
    if int(out["n_demos"]) < 1:
        raise CliError("n_demos must be >= 1", EXIT_CONFIG)
    return out


def _model_config(cfg: RunConfig, args, spec):
    from .model import VARIANTS, ModelConfig

    allowed = set(MODEL_DEFAULTS) | {"encoder_hidden", "decoder_hidden", "switcher_hidden", "var_floor", "init_var"}
    _check_keys("model", cfg.model, allowed)
    flags = {
        "variant": getattr(args, "variant", None),
        "latent_dim": getattr(args, "latent_dim", None),
        "num_skills": getattr(args, "num_skills", None),
    }
    m = _merge(MODEL_DEFAULTS, cfg.model, flags)
    variant = m.pop("variant")
    if variant not in VARIANTS:
        raise CliError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}", EXIT_CONFIG)
    for k in ("encoder_hidden", "decoder_hidden"):
        if k in m:
            m[k] = tuple(m[k])
    return ModelConfig(obs_dim=spec.state_dim, action_dim=spec.state_dim, history=spec.history, **m).with_variant(
        variant
    )


def _train_config(cfg: RunConfig, args):
    from .train import TrainConfig

    flags = {
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": getattr(args, "seed", None),
        "learning_rate": getattr(args, "lr", None),
        "checkpoint_interval": getattr(args, "checkpoint_interval", None),
    }
    return TrainConfig.from_dict(_merge(TRAIN_DEFAULTS, cfg.train, flags, "seed"))


def _eval_settings(cfg: RunConfig, args) -> dict:
    _check_keys("eval", cfg.eval, EVAL_DEFAULTS)
    flags = {
        "episodes": getattr(args, "episodes", None),
        "seed": getattr(args, "seed", None),
        "scales": getattr(args, "scales", None),
    }
    out = _merge(EVAL_DEFAULTS, cfg.eval, flags, "seed")
    if int(out["episodes"]) < 1:
        raise CliError("episodes must be >= 1", EXIT_CONFIG)
    if int(out["frechet_episodes"]) < 1:
        raise CliError("frechet_episodes must be >= 1", EXIT_CONFIG)
    return out


def _dataset(cfg: RunConfig, args, spec):
    from .simenv import generate_dataset, load_dataset

    if getattr(args, "data", None):
        return load_dataset(args.data)
    g = _gen_settings(cfg, argparse.Namespace())
    return generate_dataset(spec, int(g["n_demos"]), int(g["seed"]))


def _check_compatible(params, spec) -> None:
    c = params.config
    if c.obs_dim != spec.state_dim or c.action_dim != spec.state_dim or c.history != spec.history:
        raise CliError(
            f"model (obs {c.obs_dim}, action {c.action_dim}, history {c.history}) does not fit task "
            f"{spec.name!r} (state {spec.state_dim}, history {spec.history})",
            EXIT_CONFIG,
        )


# -- commands --------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    import numpy as np

    from .simenv import generate_dataset, save_dataset

    cfg = RunConfig.load(args.config)
    spec = _task_spec(cfg)
    g = _gen_settings(cfg, args)
    ds = generate_dataset(spec, int(g["n_demos"]), int(g["seed"]))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} demos (mean length {np.mean([len(t) for t in ds]):.2f}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_model
    from .train import check_dataset, fit, write_trainlog_csv

    cfg = RunConfig.load(args.config)
    spec = _task_spec(cfg)
    mc = _model_config(cfg, args, spec)
    tc = _train_config(cfg, args)
    ds = _dataset(cfg, args, spec)
    check_dataset(ds, mc)
    if args.resume:
        load_model(args.resume)  # fail early on an unreadable checkpoint
    params, trainlog = fit(ds, mc, tc, checkpoint_path=args.out, resume_from=args.resume)
    log_path = args.log or _sibling(args.out, ".trainlog.csv")
    write_trainlog_csv(trainlog, log_path)
    if trainlog.breakdowns:
        first, last = trainlog.breakdowns[0].total, trainlog.breakdowns[-1].total
        print(f"trained {mc.variant} for {tc.epochs} epochs: ELBO {first:.4f} -> {last:.4f}")
    else:
        print(f"epochs=0: wrote initial {mc.variant} parameters")
    print(f"checkpoint {args.out}, log {log_path}")
    return EXIT_OK


def _sibling(path: str, suffix: str) -> str:
    root, ext = os.path.splitext(path)
    return (root if ext else path) + suffix


def cmd_eval(args) -> int:
    import numpy as np

    from .checkpoint import load_model
    from .evaluate import (
        StabilityReport,
        frechet_noise_sweep,
        latent_transitions,
        robustness_curve,
        segment_dataset,
        segmentation_accuracy,
        skill_stats,
        stability_report,
        write_eval_report,
    )
    from .model import controller_bank
    from .simenv import model_policy, observation_std, rollout_batch, sample_starts

    cfg = RunConfig.load(args.config)
    spec = _task_spec(cfg)
    ev = _eval_settings(cfg, args)
    params, _ = load_model(args.model)
    _check_compatible(params, spec)
    ds = _dataset(cfg, args, spec)
    std = observation_std(ds)
    seed = int(ev["seed"])

    curve = robustness_curve(params, spec, std, ev["scales"], int(ev["episodes"]), seed, ev["mode"])
    starts = sample_starts(spec, int(ev["episodes"]), np.random.default_rng(seed))
    clean = rollout_batch(model_policy(params, ev["mode"]), spec, starts, [seed, 0])
    stats = skill_stats([r.skills for r in clean], params.config.num_skills)
    if params.config.feedback_structure:
        stab = stability_report(latent_transitions(params, ds), controller_bank(params)[1])
    else:
        stab = StabilityReport()
    rows = frechet_noise_sweep(
        {params.config.variant: params},
        spec,
        ds,
        std,
        ev["frechet_obs_scales"],
        ev["frechet_process_scales"],
        int(ev["frechet_episodes"]),
        seed,
        ev["mode"],
    )
    summary = {
        "variant": params.config.variant,
        "episodes": int(ev["episodes"]),
        "seed": seed,
        "scales": list(curve.noise_scales),
        "success_rate": float(np.mean([r.success for r in clean])),
        "auc": curve.auc,
        "num_used_skills": stats.num_used_skills,
    }
    if all(t.true_skills is not None for t in ds):
        pred = np.concatenate(segment_dataset(params, ds))
        truth = np.concatenate([t.true_skills for t in ds])
        summary["segmentation_accuracy"] = segmentation_accuracy(pred, truth, params.config.num_skills)
    write_eval_report(args.out_dir, curve, stats, stab, rows, summary)
    print(f"success {summary['success_rate']:.3f}  auc {curve.auc:.4f}  -> {args.out_dir}")
    return EXIT_OK


def cmd_segment(args) -> int:
    import numpy as np

    from .checkpoint import load_model
    from .evaluate import segment_dataset, segmentation_accuracy
    from .simenv import load_dataset

    params, _ = load_model(args.model)
    ds = load_dataset(args.data)
    for i, t in enumerate(ds):
        if t.obs.shape[1] != params.config.obs_dim or t.actions.shape[1] != params.config.action_dim:
            raise CliError(f"trajectory {i} does not fit the model's observation/action sizes", EXIT_CONFIG)
    segs = segment_dataset(params, ds)
    with open(args.out, "w", encoding="utf-8") as fh:
        for t, s in zip(ds, segs):
            fh.write(json.dumps({"task_id": t.task_id or "", "skills": [int(c) + 1 for c in s]}, separators=(",", ":")))
            fh.write("\n")
    print(f"wrote {len(segs)} segmentations to {args.out}")
    if ds and all(t.true_skills is not None for t in ds):
        acc = segmentation_accuracy(
            np.concatenate(segs), np.concatenate([t.true_skills for t in ds]), params.config.num_skills
        )
        print(f"segmentation accuracy {acc:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Train every requested variant for every seed and report robustness and recovery."""
    import csv

    import numpy as np

    from .checkpoint import save_model
    from .evaluate import robustness_curve, segment_dataset, segmentation_accuracy
    from .model import VARIANTS
    from .simenv import observation_std
    from .train import fit

    cfg = RunConfig.load(args.config)
    spec = _task_spec(cfg)
    ev = _eval_settings(cfg, args)
    ds = _dataset(cfg, args, spec)
    std = observation_std(ds)
    variants = args.variants.split(",")
    for v in variants:
        if v not in VARIANTS:
            raise CliError(f"unknown variant {v!r}", EXIT_CONFIG)
    base_tc = _train_config(cfg, args)
    seeds = [base_tc.seed + k for k in range(args.seeds)]
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    for v in variants:
        mc = _model_config(cfg, argparse.Namespace(variant=v, latent_dim=args.latent_dim, num_skills=args.num_skills), spec)
        for s in seeds:
            tc = base_tc.__class__.from_dict({**base_tc.to_dict(), "seed": s})
            params, _ = fit(ds, mc, tc)
            save_model(os.path.join(args.out_dir, f"{v}_seed{s}.json"), params)
            curve = robustness_curve(params, spec, std, ev["scales"], int(ev["episodes"]), int(ev["seed"]), ev["mode"])
            acc = ""
            if all(t.true_skills is not None for t in ds):
                acc = segmentation_accuracy(
                    np.concatenate(segment_dataset(params, ds)),
                    np.concatenate([t.true_skills for t in ds]),
                    mc.num_skills,
                )
            rows.append([v, s, curve.success_rates[0], curve.auc, acc])
            print(f"{v} seed {s}: success {curve.success_rates[0]:.3f} auc {curve.auc:.4f}", flush=True)
    with open(os.path.join(args.out_dir, "sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "success_rate", "auc", "segmentation_accuracy"])
        for v, s, sr, auc, acc in rows:
            w.writerow([v, s, f"{sr:.9g}", f"{auc:.9g}", "" if acc == "" else f"{acc:.9g}"])
    for v in variants:
        aucs = [r[3] for r in rows if r[0] == v]
        print(f"{v}: mean auc {np.mean(aucs):.4f} over {len(aucs)} seeds")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------------


def _scales(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slfc", description="Switching latent feedback controllers.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen", help="generate a demonstration dataset (JSONL)")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-demos", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.add_argument("--data", help="dataset JSONL (generated from the config when omitted)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="trainlog CSV path (default: next to the checkpoint)")
    t.add_argument("--variant", choices=["mdn", "mdn_fb", "mdn_fb_sw"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--num-skills", type=int)
    t.add_argument("--checkpoint-interval", type=int)
    t.add_argument("--resume", help="continue from a checkpoint written by an earlier run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write CSV reports")
    common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--data")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--episodes", type=int)
    e.add_argument("--scales", type=_scales, help="comma-separated noise scales")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("segment", help="per-step skill indices for a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    w = sub.add_parser("sweep", help="train and evaluate ablation variants over seeds")
    common(w)
    w.add_argument("--data")
    w.add_argument("--out-dir", required=True)
    w.add_argument("--variants", default="mdn,mdn_fb,mdn_fb_sw")
    w.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    w.add_argument("--epochs", type=int)
    w.add_argument("--batch-size", type=int)
    w.add_argument("--latent-dim", type=int)
    w.add_argument("--num-skills", type=int)
    w.add_argument("--episodes", type=int)
    w.add_argument("--scales", type=_scales)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .errors import ConfigError, ContractError, NumericalAbort, ShapeError

    try:
        return args.func(args)
    except CliError as exc:
        print(f"slfc: error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"slfc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, ArithmeticError, FloatingPointError) as exc:
        print(f"slfc: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"slfc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
