"""Train a small switching controller on the smoke task and look at what it learned.

Run:  python3 demos/quickstart.py
Takes about a minute on one core.  For a model that actually solves the task,
train longer (the acceptance runs use 300 epochs on 200 demos).
"""

import numpy as np

from slfc.evaluate import robustness_curve, segment_dataset, segmentation_accuracy, skill_stats
from slfc.model import ModelConfig, controller_bank
from slfc.simenv import generate_dataset, model_policy, observation_std, rollout_batch, sample_starts, smoke_spec
from slfc.train import TrainConfig, fit

spec = smoke_spec()
data = generate_dataset(spec, 60, seed=0)
print(f"{len(data)} demos, mean length {np.mean([len(t) for t in data]):.1f}, true goals {spec.goals.tolist()}")

cfg = ModelConfig(obs_dim=2, action_dim=2, latent_dim=2, num_skills=5)
params, log = fit(data, cfg, TrainConfig(epochs=60, batch_size=32, seed=0))
print(f"ELBO per step: {log.totals()[0]:.3f} -> {log.totals()[-1]:.3f}")

goals, gains = controller_bank(params)
for c, (g, K) in enumerate(zip(goals, gains)):
    print(f"skill {c}: latent goal {np.round(g, 3)}, gain eigenvalues {np.round(np.linalg.eigvals(K), 3)}")

# which learned skill explains each step of the demonstrations
pred = segment_dataset(params, data)
truth = np.concatenate([t.true_skills for t in data])
print("segmentation accuracy:", round(segmentation_accuracy(np.concatenate(pred), truth, 5, 3), 3))
print("first demo, true :", "".join(map(str, data[0].true_skills)))
print("first demo, model:", "".join(map(str, pred[0])))

runs = rollout_batch(model_policy(params, "mean"), spec, sample_starts(spec, 20, np.random.default_rng(1)), 1)
stats = skill_stats([r.skills for r in runs], 5)
print(f"closed-loop success {np.mean([r.success for r in runs]):.2f}, skills used {stats.num_used_skills}")

curve = robustness_curve(params, spec, observation_std(data), episodes=20, seed=2)
print("success vs observation noise:", dict(zip(curve.noise_scales, curve.success_rates)), "AUC", round(curve.auc, 3))
