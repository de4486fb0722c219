import math

import numpy as np
import pytest

from slfc.baselines import (
    BcConfig,
    MdnConfig,
    bc_loss,
    bc_policy,
    bc_predict,
    fit_bc,
    fit_mdn,
    init_bc,
    init_mdn,
    load_baseline,
    mdn_act,
    mdn_heads,
    mdn_loss,
    mdn_policy,
    save_baseline,
)
from slfc.errors import ConfigError, ShapeError
from slfc.numcore import Tape, numeric_grad
from slfc.simenv import generate_dataset, rollout_batch, smoke_spec
from slfc.train import TrainConfig


def mdn(C=3, seed=0, scale=0.3):
    p = init_mdn(MdnConfig(2, 2, C), np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    return p.__class__(p.config, {k: v + scale * rng.normal(size=v.shape) for k, v in p.arrays.items()})


def set_heads(p, **arrays):
    return p.__class__(p.config, {**p.arrays, **arrays})


# -- behaviour cloning ------------------------------------------------------------------


def test_bc_shapes():
    p = init_bc(BcConfig(3, 2), np.random.default_rng(0))
    assert p.arrays["trunk.W0"].shape == (3, 256) and p.arrays["out.W"].shape == (256, 2)
    assert bc_predict(np.zeros(3), p).shape == (2,)
    assert bc_predict(np.zeros((4, 3)), p).shape == (4, 2)
    with pytest.raises(ShapeError):
        bc_predict(np.zeros(2), p)


def test_bc_loss_examples():
    p = init_bc(BcConfig(1, 1, hidden=(4,)), np.random.default_rng(0))
    zero = dict(p.arrays)
    zero["out.W"], zero["out.b"] = np.zeros((4, 1)), np.zeros(1)
    p0 = p.__class__(p.config, zero)
    assert bc_loss(np.array([[0.5]]), np.array([[2.0]]), p0) == pytest.approx(4.0)
    pred = bc_predict(np.array([[0.5]]), p)
    assert bc_loss(np.array([[0.5]]), pred, p) == 0.0
    with pytest.raises(ShapeError):
        bc_loss(np.zeros((2, 1)), np.zeros((3, 1)), p)


def test_bc_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    p = init_bc(BcConfig(2, 2, hidden=(8, 8)), rng)
    o, u = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    tape = Tape()
    grads = tape.backward(bc_loss(o, u, p.__class__(p.config, tape.leaves_from(p.arrays))))
    fd = numeric_grad(lambda a: float(bc_loss(o, u, p.__class__(p.config, a))), p.arrays)
    for k in p.arrays:
        err = np.max(np.abs(grads[k] - fd[k]) / np.maximum(1e-3, np.abs(fd[k]) + np.abs(grads[k])))
        assert err < 1e-5, k


# -- MDN -----------------------------------------------------------------------------------


def _brute_nll(o, u, p):
    log_w, mean, var = mdn_heads(o, p)
    dens = np.exp(log_w) * np.prod(np.exp(-0.5 * (u[:, None] - mean) ** 2 / var) / np.sqrt(2 * math.pi * var), -1)
    return -np.mean(np.log(dens.sum(-1)))


def test_mdn_single_component_is_gaussian_nll():
    p = mdn(C=1)
    o, u = np.array([[0.2, -0.1]]), np.array([[0.4, 0.0]])
    _, mean, var = mdn_heads(o, p)
    ref = -np.sum(-0.5 * (u[0] - mean[0, 0]) ** 2 / var[0, 0] - 0.5 * np.log(2 * math.pi * var[0, 0]))
    assert mdn_loss(o, u, p) == pytest.approx(ref, abs=1e-12)


def test_mdn_duplicate_components_collapse():
    one = mdn(C=1, seed=2)
    a = one.arrays
    two = init_mdn(MdnConfig(2, 2, 2), np.random.default_rng(0))
    arrays = {k: v for k, v in a.items() if k.startswith("trunk.")}
    arrays["head.Wl"], arrays["head.bl"] = np.zeros((64, 2)), np.zeros(2)
    for k in ("Wmu", "Wn"):
        arrays[f"head.{k}"] = np.tile(a[f"head.{k}"], (1, 2))
    for k in ("bmu", "bn"):
        arrays[f"head.{k}"] = np.tile(a[f"head.{k}"], 2)
    two = two.__class__(two.config, arrays)
    rng = np.random.default_rng(3)
    o, u = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    assert mdn_loss(o, u, two) == pytest.approx(mdn_loss(o, u, one), abs=1e-12)


def test_mdn_loss_matches_brute_force():
    rng = np.random.default_rng(4)
    for seed in range(20):
        p = mdn(C=4, seed=seed)
        o, u = rng.normal(size=(8, 2)), rng.normal(scale=0.5, size=(8, 2))
        assert abs(mdn_loss(o, u, p) - _brute_nll(o, u, p)) < 1e-10


def test_mdn_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    p = mdn(C=2, seed=5, scale=0.1)
    o, u = rng.normal(size=(3, 2)), rng.normal(scale=0.3, size=(3, 2))
    tape = Tape()
    grads = tape.backward(mdn_loss(o, u, p.__class__(p.config, tape.leaves_from(p.arrays))))
    fd = numeric_grad(lambda a: float(mdn_loss(o, u, p.__class__(p.config, a))), p.arrays)
    for k in p.arrays:
        err = np.max(np.abs(grads[k] - fd[k]) / np.maximum(1.0, np.abs(fd[k]) + np.abs(grads[k])))
        assert err < 1e-5, k


def test_mdn_act_mean_picks_heaviest_component():
    p = mdn(C=2)
    p = set_heads(p, **{"head.Wl": np.zeros((64, 2)), "head.bl": np.log([0.9, 0.1])})
    o = np.array([0.3, 0.3])
    u, c = mdn_act(o, p, "mean")
    _, mean, _ = mdn_heads(o[None], p)
    assert c == 0
    np.testing.assert_array_equal(u, mean[0, 0])
    tie = set_heads(p, **{"head.bl": np.zeros(2)})
    assert mdn_act(o, tie, "mean")[1] == 0
    assert mdn_act(o, mdn(C=1), "mean")[1] == 0


def test_mdn_sample_frequencies_match_weights():
    p = mdn(C=3)
    w = np.array([0.5, 0.3, 0.2])
    p = set_heads(p, **{"head.Wl": np.zeros((64, 3)), "head.bl": np.log(w)})
    n = 100_000
    _, c = mdn_act(np.zeros((n, 2)), p, "sample", np.random.default_rng(6))
    freq = np.bincount(c, minlength=3) / n
    assert np.all(np.abs(freq - w) < 3 * np.sqrt(w * (1 - w) / n))


def test_mdn_act_bad_mode():
    from slfc.errors import ContractError

    with pytest.raises(ContractError):
        mdn_act(np.zeros(2), mdn(), "greedy")


# -- training and files ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def data():
    return generate_dataset(smoke_spec(), 10, seed=0)


def test_fit_bc_and_mdn_reduce_loss(data):
    _, bc_losses = fit_bc(data, TrainConfig(epochs=15, batch_size=32, learning_rate=1e-3), hidden=(32, 32))
    assert bc_losses[-1] < bc_losses[0]
    _, mdn_losses = fit_mdn(data, 3, TrainConfig(epochs=15, batch_size=32, learning_rate=1e-3), hidden=(16, 16))
    assert mdn_losses[-1] < mdn_losses[0]


def test_baseline_policies_roll_out(data):
    spec = smoke_spec()
    bc, _ = fit_bc(data, TrainConfig(epochs=1, batch_size=64), hidden=(8, 8))
    md, _ = fit_mdn(data, 2, TrainConfig(epochs=1, batch_size=64), hidden=(8, 8))
    starts = np.array([[-1.0, -1.0]])
    for policy in (bc_policy(bc), mdn_policy(md)):
        r = rollout_batch(policy, spec, starts, 0)[0]
        assert len(r.trajectory) >= 1 and r.latents.shape[1] == 0


def test_baseline_checkpoint_round_trip(tmp_path):
    for p in (init_bc(BcConfig(2, 2, hidden=(4,)), np.random.default_rng(0)), mdn(C=2)):
        path = tmp_path / "b.json"
        save_baseline(path, p)
        q = load_baseline(path)
        assert q.config == p.config
        for k in p.arrays:
            assert q.arrays[k].tobytes() == np.asarray(p.arrays[k]).tobytes()


def test_load_baseline_rejects_model_checkpoint(tmp_path):
    from slfc.checkpoint import save_model
    from slfc.model import ModelConfig, init_params

    path = tmp_path / "m.json"
    save_model(path, init_params(ModelConfig(2, 2, 2, 2), np.random.default_rng(0)))
    with pytest.raises(ConfigError):
        load_baseline(path)
