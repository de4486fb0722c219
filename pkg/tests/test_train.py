import csv

import numpy as np
import pytest

from slfc.checkpoint import load_model
from slfc.errors import ConfigError, NumericalAbort
from slfc.model import ModelConfig, init_params
from slfc.simenv import generate_dataset, smoke_spec
from slfc.train import (
    AdamState,
    TrainConfig,
    adam_step,
    clip_by_global_norm,
    fit,
    write_trainlog_csv,
)


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(smoke_spec(), 12, seed=3)


CFG = ModelConfig(2, 2, 2, 3)


def test_adam_zero_gradient_keeps_params():
    arrays = {"w": np.array([1.0, -2.0]), "b": np.array(0.5)}
    grads = {k: np.zeros_like(v) for k, v in arrays.items()}
    new, state = adam_step(arrays, grads, AdamState(), TrainConfig())
    assert state.t == 1
    for k in arrays:
        np.testing.assert_array_equal(new[k], arrays[k])


def test_adam_first_step_magnitude_is_lr():
    cfg = TrainConfig(learning_rate=1e-3)
    new, _ = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState(), cfg)
    # m_hat = 1, v_hat = 1  ->  step = lr / (1 + eps)
    assert new["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_matches_hand_recurrence():
    cfg = TrainConfig(learning_rate=0.1)
    x, m, v = 1.0, 0.0, 0.0
    arrays, state = {"x": np.array(x)}, AdamState()
    for t, g in enumerate([0.5, -1.0, 2.0], start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        arrays, state = adam_step(arrays, {"x": np.array(g)}, state, cfg)
        assert float(arrays["x"]) == pytest.approx(x, rel=1e-14)


def test_adam_nan_gradient_names_parameter():
    with pytest.raises(NumericalAbort, match="'gains'"):
        adam_step({"gains": np.zeros(2)}, {"gains": np.array([0.0, np.nan])}, AdamState(), TrainConfig())


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert np.sqrt(sum(float(x @ x) for x in clipped.values())) == pytest.approx(1.0)
    same, _ = clip_by_global_norm(g, 10.0)
    np.testing.assert_array_equal(same["a"], g["a"])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 1, "momentum": 0.9})
    assert TrainConfig.from_dict(TrainConfig(epochs=3).to_dict()) == TrainConfig(epochs=3)


def test_zero_epochs_returns_initial_params(small_data):
    params, log = fit(small_data, CFG, TrainConfig(epochs=0, seed=4))
    ref = init_params(CFG, np.random.default_rng(4))
    assert log.epochs == []
    for k in ref.arrays:
        np.testing.assert_array_equal(params.arrays[k], ref.arrays[k])


def test_shape_mismatch_rejected_before_training(small_data):
    with pytest.raises(ConfigError):
        fit(small_data, ModelConfig(3, 2, 2, 3), TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        fit([], CFG, TrainConfig(epochs=1))


def test_training_is_deterministic(small_data):
    tc = TrainConfig(epochs=3, batch_size=16, seed=1)
    a, la = fit(small_data, CFG, tc)
    b, lb = fit(small_data, CFG, tc)
    for k in a.arrays:
        np.testing.assert_array_equal(a.arrays[k], b.arrays[k])
    assert la.to_json() == lb.to_json()


def test_resume_is_bit_identical(small_data, tmp_path):
    full_path, part_path = tmp_path / "full.json", tmp_path / "part.json"
    full, full_log = fit(small_data, CFG, TrainConfig(epochs=4, batch_size=16, seed=2), checkpoint_path=full_path)
    fit(small_data, CFG, TrainConfig(epochs=2, batch_size=16, seed=2), checkpoint_path=part_path)
    resumed, resumed_log = fit(
        small_data, CFG, TrainConfig(epochs=4, batch_size=16, seed=2), checkpoint_path=part_path, resume_from=part_path
    )
    for k in full.arrays:
        np.testing.assert_array_equal(full.arrays[k], resumed.arrays[k])
    assert full_log.to_json() == resumed_log.to_json()
    assert full_path.read_bytes() == part_path.read_bytes()


def test_periodic_checkpoints(small_data, tmp_path):
    path = tmp_path / "ck.json"
    fit(small_data, CFG, TrainConfig(epochs=2, batch_size=64, checkpoint_interval=1), checkpoint_path=path)
    params, state = load_model(path)
    assert state["epoch"] == 2 and state["adam"]["t"] > 0


def test_resume_requires_matching_config(small_data, tmp_path):
    path = tmp_path / "ck.json"
    fit(small_data, CFG, TrainConfig(epochs=1, batch_size=64), checkpoint_path=path)
    with pytest.raises(ConfigError):
        fit(small_data, ModelConfig(2, 2, 3, 3), TrainConfig(epochs=2), resume_from=path)


def test_elbo_improves_and_settles(small_data):
    _, log = fit(small_data, CFG, TrainConfig(epochs=60, batch_size=16, seed=0))
    totals = log.totals()
    assert totals[-1] > totals[0] + 1.0
    tail = -totals[-6:]  # loss over the final 10% of epochs
    slope = np.polyfit(np.arange(len(tail)), tail, 1)[0]
    assert slope <= 0.0


def test_trainlog_csv(small_data, tmp_path):
    _, log = fit(small_data, CFG, TrainConfig(epochs=2, batch_size=64))
    path = tmp_path / "log.csv"
    write_trainlog_csv(log, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["epoch", "recon_obs", "recon_act", "kl_z", "kl_switch", "total"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    r = [float(x) for x in rows[1][1:]]
    assert r[4] == pytest.approx(r[0] + r[1] - r[2] - r[3], rel=1e-8)
