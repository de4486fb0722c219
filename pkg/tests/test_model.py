import math

import numpy as np
import pytest
from oracles import brute_posterior

from slfc.errors import ConfigError, DegenerateInputError, ShapeError
from slfc.model import (
    ModelConfig,
    ModelParams,
    controller_bank,
    decode,
    encode,
    estimate_goal,
    init_params,
    layer_to_controller,
    mixture_action_density,
    policy,
    posterior_skill,
    reparam_sample,
    skill_heads,
    switch_prior,
)
from slfc.numcore import DiagGaussian, mvn_logpdf_diag


def make(S=2, C=3, A=2, O=2, seed=0, **kw):
    return init_params(ModelConfig(O, A, S, C, **kw), np.random.default_rng(seed))


def randomize(params, seed=1, scale=0.5):
    rng = np.random.default_rng(seed)
    return params.with_arrays({k: v + scale * rng.normal(size=v.shape) for k, v in params.arrays.items()})


def scalar_two_skill(prior_logits=(0.0, 0.0), var=1.0):
    """S = A = 1, C = 2: skill means K_c (g_c - 0) = +1 and -1 at z = 0."""
    p = make(S=1, C=2, A=1, O=1)
    arrays = dict(p.arrays)
    arrays["goals"] = np.array([[1.0], [-1.0]])
    arrays["gains"] = np.ones((2, 1, 1))
    arrays["sw.bl"] = np.array(prior_logits, dtype=float)
    arrays["sw.bn"] = np.full(2, math.log(var - p.config.var_floor))
    return p.with_arrays(arrays)


# -- config ---------------------------------------------------------------------


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigError):
        ModelConfig(0, 2, 2, 2)
    with pytest.raises(ConfigError):
        ModelConfig(2, 2, 2, 2, var_floor=0.0)
    with pytest.raises(ConfigError):
        ModelConfig(2, 2, 2, 2, encoder_hidden=(0,))
    cfg = ModelConfig(2, 3, 4, 5, history=2).with_variant("mdn_fb")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.variant == "mdn_fb" and cfg.input_dim == 4
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_variants():
    base = ModelConfig(2, 2, 2, 2)
    assert base.with_variant("mdn").feedback_structure is False
    assert base.with_variant("mdn").switch_kl is False
    assert base.with_variant("mdn_fb").feedback_structure and not base.with_variant("mdn_fb").switch_kl
    assert base.with_variant("mdn_fb_sw").switch_kl
    with pytest.raises(ConfigError):
        base.with_variant("nope")


# -- encoder / decoder ---------------------------------------------------------------


def _zero_final_layers(p):
    arrays = dict(p.arrays)
    for k in ("enc.Wm", "enc.bm", "enc.Wv", "enc.bv", "dec.Wm", "dec.bm"):
        arrays[k] = np.zeros_like(arrays[k])
    return p.with_arrays(arrays)


def test_encode_zero_final_layer():
    p = _zero_final_layers(make())
    q = encode(np.array([0.3, -2.0]), p)
    np.testing.assert_array_equal(q.mean, 0.0)
    np.testing.assert_allclose(q.var, math.log(2.0) + p.config.var_floor, rtol=1e-15)
    assert not decode(np.array([1.0, 2.0]), p).mean.any()


def test_encode_initial_variance_is_init_var():
    p = make()
    q = encode(np.random.default_rng(0).normal(size=(5, 2)), p)
    np.testing.assert_allclose(q.var, p.config.init_var, rtol=1e-12)


def test_encode_deterministic_and_shapes():
    p = randomize(make())
    o = np.array([0.1, 0.2])
    a, b = encode(o, p), encode(o.copy(), p)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.var, b.var)
    assert encode(np.zeros((7, 2)), p).mean.shape == (7, 2)
    with pytest.raises(ShapeError):
        encode(np.zeros(3), p)


def test_encode_weight_sensitivity_matches_finite_difference():
    p = randomize(make())
    o = np.array([0.4, -0.3])
    eps = 1e-6
    base = encode(o, p).mean
    bumped = dict(p.arrays)
    bumped["enc.W0"] = bumped["enc.W0"].copy()
    bumped["enc.W0"][1, 3] += eps
    bumped_down = dict(p.arrays)
    bumped_down["enc.W0"] = bumped_down["enc.W0"].copy()
    bumped_down["enc.W0"][1, 3] -= eps
    fd = (encode(o, p.with_arrays(bumped)).mean - encode(o, p.with_arrays(bumped_down)).mean) / (2 * eps)
    # analytic sensitivity through the tanh chain
    a = p.arrays
    pre0 = o @ a["enc.W0"] + a["enc.b0"]
    h0 = np.tanh(pre0)
    dh0 = np.zeros_like(h0)
    dh0[3] = o[1] * (1 - h0[3] ** 2)
    pre1 = h0 @ a["enc.W1"] + a["enc.b1"]
    dh1 = (dh0 @ a["enc.W1"]) * (1 - np.tanh(pre1) ** 2)
    np.testing.assert_allclose(fd, dh1 @ a["enc.Wm"], rtol=1e-6, atol=1e-10)
    assert base.shape == (2,)


def test_reparam_sample():
    g = DiagGaussian(np.array([1.0, -2.0]), np.array([4.0, 0.25]))
    np.testing.assert_array_equal(reparam_sample(g, np.zeros(2)), g.mean)
    n = np.array([0.3, -1.1])
    np.testing.assert_array_equal(reparam_sample(DiagGaussian(np.zeros(2), np.ones(2)), n), n)
    with pytest.raises(ShapeError):
        reparam_sample(g, np.zeros(3))


def test_reparam_sample_monte_carlo():
    rng = np.random.default_rng(2)
    N = 100_000
    mean, var = np.array([0.5, -1.0]), np.array([2.0, 0.1])
    g = DiagGaussian(np.tile(mean, (N, 1)), np.tile(var, (N, 1)))
    z = reparam_sample(g, rng.standard_normal((N, 2)))
    assert np.all(np.abs(z.mean(0) - mean) < 3 * np.sqrt(var / N))
    # std error of the sample variance of a Gaussian is var * sqrt(2/(N-1))
    assert np.all(np.abs(z.var(0, ddof=1) - var) < 3 * var * np.sqrt(2 / (N - 1)))


def test_decoder_variance_is_shared():
    p = randomize(make())
    a, b = decode(np.array([0.0, 1.0]), p), decode(np.array([-3.0, 2.0]), p)
    np.testing.assert_array_equal(a.var, b.var)
    np.testing.assert_allclose(a.var, np.exp(p.arrays["dec.logvar"]))


# -- switcher and policy ------------------------------------------------------------------


def test_switch_prior_examples():
    p = make()
    np.testing.assert_allclose(np.exp(switch_prior(np.array([0.3, 0.1]), p).log_probs), 1 / 3)
    assert switch_prior(np.zeros(2), make(C=1)).probs[0] == 1.0
    q = scalar_two_skill(prior_logits=(0.0, math.log(3.0)))
    np.testing.assert_allclose(switch_prior(np.zeros(1), q).probs, [0.25, 0.75], atol=1e-15)


def test_switch_prior_normalized():
    p = randomize(make(C=6), scale=2.0)
    z = np.random.default_rng(3).normal(scale=3, size=(200, 2))
    assert np.max(np.abs(np.exp(switch_prior(z, p).log_probs).sum(-1) - 1)) < 1e-12


def test_policy_feedback_law_examples():
    p = make(S=2, A=2, C=2)
    arrays = dict(p.arrays)
    arrays["gains"] = np.stack([np.eye(2), np.eye(2)])
    arrays["goals"] = np.array([[2.0, -1.0], [0.5, 0.5]])
    p = p.with_arrays(arrays)
    np.testing.assert_allclose(policy(np.zeros(2), 0, p).mean, [2.0, -1.0])
    np.testing.assert_allclose(policy(np.array([0.5, 0.5]), 1, p).mean, [0.0, 0.0])
    q = scalar_two_skill()
    assert policy(np.zeros(1), 0, q).mean[0] == pytest.approx(1.0)
    with pytest.raises(IndexError):
        policy(np.zeros(2), 2, p)
    with pytest.raises(IndexError):
        policy(np.zeros(2), -1, p)


def test_policy_zero_at_goal_and_linear_in_z():
    p = randomize(make(S=3, A=2, C=4))
    g, K = controller_bank(p)
    rng = np.random.default_rng(4)
    for c in range(4):
        np.testing.assert_allclose(policy(g[c], c, p).mean, 0.0, atol=1e-15)
        z, dz = rng.normal(size=3), rng.normal(size=3)
        slope = policy(z + dz, c, p).mean - policy(z, c, p).mean
        np.testing.assert_allclose(slope, -K[c] @ dz, atol=1e-12)


def test_free_mean_ablation_has_no_gain_bank():
    p = make(feedback_structure=False, switch_kl=False)
    assert "gains" not in p.arrays and "sw.Wmu" in p.arrays
    with pytest.raises(ConfigError):
        controller_bank(p)
    means = skill_heads(np.zeros((1, 2)), p).action_mean
    assert not np.allclose(means[0, 0], means[0, 1])


# -- posterior ---------------------------------------------------------------------------


def test_posterior_scalar_hand_example():
    q = posterior_skill(np.zeros(1), np.ones(1), scalar_two_skill())
    np.testing.assert_allclose(q.probs, [0.8808, 0.1192], atol=1e-4)
    np.testing.assert_allclose(q.probs, [1 / (1 + math.exp(-2)), math.exp(-2) / (1 + math.exp(-2))], atol=1e-12)


def test_posterior_point_mass_prior_wins():
    q = posterior_skill(np.zeros(1), -np.ones(1), scalar_two_skill(prior_logits=(0.0, -np.inf)))
    np.testing.assert_array_equal(q.probs, [1.0, 0.0])


def test_posterior_identical_skills_equals_prior():
    p = randomize(make(C=4))
    arrays = dict(p.arrays)
    arrays["goals"] = np.tile(arrays["goals"][:1], (4, 1))
    arrays["gains"] = np.tile(arrays["gains"][:1], (4, 1, 1))
    arrays["sw.Wn"] = np.tile(arrays["sw.Wn"][:, :2], (1, 4))
    arrays["sw.bn"] = np.tile(arrays["sw.bn"][:2], 4)
    p = p.with_arrays(arrays)
    z, u = np.array([0.3, -0.2]), np.array([1.0, 2.0])
    np.testing.assert_allclose(posterior_skill(z, u, p).probs, switch_prior(z, p).probs, atol=1e-14)


def test_posterior_matches_brute_force_on_random_inputs():
    rng = np.random.default_rng(5)
    for trial in range(1000):
        if trial % 50 == 0:
            p = randomize(make(S=2, A=2, C=3, seed=trial), seed=trial, scale=0.3)
        z, u = rng.normal(size=2), rng.normal(scale=0.3, size=2)
        post = posterior_skill(z, u, p).probs
        ref, log_evidence = brute_posterior(z, u, p)
        assert np.max(np.abs(post - ref)) < 1e-10
        assert abs(post.sum() - 1) < 1e-10
        assert mixture_action_density(z, u, p) == pytest.approx(log_evidence, abs=1e-9)


def test_posterior_degenerate_input():
    # every component's likelihood underflows to -inf
    with np.errstate(over="ignore"), pytest.raises(DegenerateInputError):
        posterior_skill(np.zeros(1), np.array([1e200]), scalar_two_skill())


def test_mixture_density_single_component():
    p = randomize(make(C=1))
    z, u = np.array([0.2, 0.1]), np.array([0.5, -0.5])
    pol = policy(z, 0, p)
    assert mixture_action_density(z, u, p) == pytest.approx(mvn_logpdf_diag(u, pol), abs=1e-12)


def test_mixture_density_invariant_under_relabeling():
    p = randomize(make(C=3, feedback_structure=False, switch_kl=False), scale=0.3)
    perm = np.array([2, 0, 1])
    A = p.config.action_dim
    cols = (perm[:, None] * A + np.arange(A)).ravel()
    arrays = dict(p.arrays)
    arrays["sw.Wl"], arrays["sw.bl"] = arrays["sw.Wl"][:, perm], arrays["sw.bl"][perm]
    arrays["sw.Wmu"], arrays["sw.bmu"] = arrays["sw.Wmu"][:, cols], arrays["sw.bmu"][cols]
    arrays["sw.Wn"], arrays["sw.bn"] = arrays["sw.Wn"][:, cols], arrays["sw.bn"][cols]
    q = p.with_arrays(arrays)
    rng = np.random.default_rng(6)
    for _ in range(20):
        z, u = rng.normal(size=2), rng.normal(size=2)
        assert mixture_action_density(z, u, q) == pytest.approx(mixture_action_density(z, u, p), rel=1e-12)


# -- layer <-> controller ----------------------------------------------------------------------


def test_layer_to_controller_example():
    K, g, residual = layer_to_controller(np.array([[-1.0, 0.0], [0.0, -2.0]]), np.array([3.0, 4.0]))
    np.testing.assert_allclose(K, [[1, 0], [0, 2]])
    np.testing.assert_allclose(g, [3, 2])
    z = np.ones(2)
    np.testing.assert_allclose(K @ (g - z), [2, 2])
    assert residual < 1e-12


def test_layer_to_controller_zero_bias_and_zero_weight():
    W = np.random.default_rng(7).normal(size=(2, 3))
    K, g, res = layer_to_controller(W, np.zeros(2))
    assert not g.any() and res == 0.0
    K, g, res = layer_to_controller(np.zeros((2, 2)), np.array([1.0, -2.0]))
    assert not g.any() and res == pytest.approx(math.sqrt(5.0))


def test_layer_to_controller_equivalence_random():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(500):
        A, S = rng.integers(1, 5, size=2)
        W = rng.normal(size=(A, S))
        while np.linalg.matrix_rank(W) < min(A, S):
            W = rng.normal(size=(A, S))
        b = W @ rng.normal(size=S)  # in the column space
        K, g, _ = layer_to_controller(W, b)
        Z = rng.normal(size=(100, S))
        worst = max(worst, np.max(np.abs(Z @ W.T + b - (g - Z) @ K.T)))
    assert worst < 1e-8


def test_estimate_goal():
    z = np.array([0.3, -0.4])
    np.testing.assert_allclose(estimate_goal(np.eye(2), np.zeros(2), z), z)
    np.testing.assert_allclose(estimate_goal(np.eye(2), np.array([1.0, 2.0]), np.zeros(2)), [1, 2])
    p = randomize(make(S=2, A=2, C=3), scale=0.3)
    g, K = controller_bank(p)
    rng = np.random.default_rng(9)
    for c in range(3):
        z = rng.normal(size=2)
        np.testing.assert_allclose(estimate_goal(K[c], policy(z, c, p).mean, z), g[c], atol=1e-8)


def test_num_parameters_and_copy():
    p = make()
    q = p.copy()
    q.arrays["goals"][0, 0] += 1.0
    assert p.arrays["goals"][0, 0] != q.arrays["goals"][0, 0]
    assert p.num_parameters() == sum(v.size for v in p.arrays.values())
    assert isinstance(p, ModelParams)
