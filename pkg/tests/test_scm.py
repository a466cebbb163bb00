import numpy as np
import pytest

from cda import objectives as obj
from cda import scm


def linear_spec(seed=0, lag=0, **kw):
    return scm.default_spec(d_x=3, K=4, seed=seed, lag=lag, **kw)


def test_zero_dynamics_stay_zero():
    spec = scm.ScmSpec(
        d_x=2, K=2, A=np.eye(2) * 0.5, B=np.zeros((2, 2)), c=np.ones(2),
        noise_scale=0.0, y_noise_scale=0.0, lag=0,
    )
    ep = scm.simulate(spec, 1, 10, seed=0)[0]
    assert np.all(ep.X == 0.0)
    assert np.all(ep.Y == 0.0)


def test_same_seed_bit_identical():
    spec = linear_spec()
    a = scm.simulate(spec, 3, 20, seed=42)
    b = scm.simulate(spec, 3, 20, seed=42)
    for ea, eb in zip(a, b):
        assert np.array_equal(ea.X, eb.X)
        assert np.array_equal(ea.Y, eb.Y)
        assert np.array_equal(ea.Z, eb.Z)


def test_unstable_spec_rejected():
    with pytest.raises(scm.ScmError, match="spectral radius"):
        scm.ScmSpec(d_x=2, K=2, A=np.eye(2) * 1.1, B=np.zeros((2, 2)), c=np.ones(2))


def test_stationary_mean_oracle():
    # untreated long run: empirical mean of Y within 3 long-run standard errors
    spec = scm.ScmSpec(
        d_x=2, K=2,
        A=np.array([[0.6, 0.1], [0.0, 0.5]]),
        B=np.vstack([np.zeros(2), np.ones(2)]),
        c=np.array([1.0, -0.5]),
        noise_scale=0.2, y_noise_scale=0.1, lag=0, x0=np.array([0.3, -0.2]),
        policy=scm.LoggingPolicy([1.0, 0.0]),  # never treats
    )
    n = 10000
    ep = scm.simulate(spec, 1, n, seed=5)[0]
    _, mean_y, longrun = scm.stationary_stats(spec)
    se = np.sqrt(longrun / n)
    assert abs(ep.Y.mean() - mean_y) < 3 * se


def test_intervene_consistency_with_observed_arm():
    spec = linear_spec()
    ep = scm.simulate(spec, 1, 15, seed=1)[0]
    t = 6
    arm = int(ep.Z[t - spec.lag]) if t - spec.lag >= 0 else 0
    mean = scm.intervene(spec, ep, t, arm)
    # conditional one-step mean under the factual arm: X[t+1] minus its noise
    assert np.allclose(mean, ep.X[t + 1] - ep.noise_trace.eps[t + 1], atol=1e-12)


def test_intervene_equal_effects_equal_means():
    spec = linear_spec()
    spec.B[2] = spec.B[1]
    ep = scm.simulate(spec, 1, 10, seed=2)[0]
    assert np.array_equal(scm.intervene(spec, ep, 3, 1), scm.intervene(spec, ep, 3, 2))


def test_intervene_contrast_is_effect_difference():
    spec = linear_spec()
    ep = scm.simulate(spec, 1, 10, seed=3)[0]
    got = scm.intervene(spec, ep, 4, 2) - scm.intervene(spec, ep, 4, 0)
    assert np.allclose(got, spec.B[2] - spec.B[0], atol=1e-12)


def test_intervene_range_check():
    spec = linear_spec()
    ep = scm.simulate(spec, 1, 10, seed=3)[0]
    with pytest.raises(scm.ScmError, match="out of range"):
        scm.intervene(spec, ep, 9, 1)


def test_counterfactual_factual_arm_is_bit_exact():
    spec = linear_spec()
    eps = scm.simulate(spec, 5, 30, seed=4)
    for ep in eps:
        for t in (0, 7, 28):
            x_cf, y_cf = scm.counterfactual(spec, ep, t, int(ep.Z[t]))
            assert np.array_equal(x_cf[0], ep.X[t + 1])
            assert y_cf[0] == ep.Y[t + 1]


def test_counterfactual_linear_identity():
    spec = linear_spec()
    ep = scm.simulate(spec, 1, 25, seed=5)[0]
    for t in (0, 5, 11):
        for z in range(spec.K):
            x_cf, y_cf = scm.counterfactual(spec, ep, t, z)
            want = spec.B[z] - spec.B[ep.Z[t]]
            assert np.allclose(x_cf[0] - ep.X[t + 1], want, atol=1e-12)
            assert abs((y_cf[0] - ep.Y[t + 1]) - spec.c @ want) < 1e-12


def test_counterfactual_requires_trace():
    spec = linear_spec()
    ep = scm.simulate(spec, 1, 10, seed=6, keep_trace=False)[0]
    with pytest.raises(scm.ScmError, match="keep_trace"):
        scm.counterfactual(spec, ep, 2, 1)


def test_counterfactual_lagged_effect_timing():
    spec = linear_spec(lag=1)
    ep = scm.simulate(spec, 1, 20, seed=7)[0]
    t = 5
    z = (int(ep.Z[t]) + 1) % spec.K
    x_cf, _ = scm.counterfactual(spec, ep, t, z, horizon=3)
    # with lag 1 the replaced arm first lands on the t+2 covariates
    assert np.array_equal(x_cf[0], ep.X[t + 1])
    assert not np.allclose(x_cf[1], ep.X[t + 2])
    assert np.allclose(x_cf[1] - ep.X[t + 2], spec.B[z] - spec.B[ep.Z[t]], atol=1e-12)


def test_oracle_cate_examples():
    spec = linear_spec()
    ep = scm.simulate(spec, 1, 12, seed=8)[0]
    assert np.array_equal(scm.oracle_cate(spec, ep, 3, 2, 2), np.zeros(3))
    assert np.allclose(scm.oracle_cate(spec, ep, 3, 2, 0), spec.B[2] - spec.B[0])
    assert np.array_equal(
        scm.oracle_cate(spec, ep, 3, 1, 2), -scm.oracle_cate(spec, ep, 3, 2, 1)
    )


def test_oracle_cate_constant_across_history():
    spec = linear_spec()
    eps = scm.simulate(spec, 10, 20, seed=9)
    rng = np.random.default_rng(0)
    vals = [
        scm.oracle_cate(spec, eps[rng.integers(10)], int(rng.integers(19)), 3, 0)
        for _ in range(100)
    ]
    assert all(np.array_equal(v, vals[0]) for v in vals)


def test_observational_contrast_is_zero_under_history_conditioning():
    spec = linear_spec()
    ep = scm.simulate(spec, 1, 10, seed=10)[0]
    assert np.allclose(scm.oracle_cate_observational(spec, ep, 4, 2), 0.0)


def test_tanh_transition_oracles_still_exact():
    spec = scm.default_spec(d_x=2, K=3, seed=11, lag=0, transition="tanh")
    ep = scm.simulate(spec, 1, 15, seed=11)[0]
    t = 4
    mean = scm.intervene(spec, ep, t, 1)
    assert np.allclose(mean, np.tanh(spec.A @ ep.X[t] + spec.B[1]), atol=1e-12)
    x_cf, _ = scm.counterfactual(spec, ep, t, int(ep.Z[t]))
    assert np.array_equal(x_cf[0], ep.X[t + 1])


def test_domain_shift_rejects_causal_structure():
    spec = linear_spec()
    for key in ("A", "c", "u_load"):
        shift = scm.DomainShift(param_overrides={key: np.zeros(1)})
        with pytest.raises(scm.ScmError, match="causal structure must be shared"):
            shift.apply(spec)


def test_domain_pair_zero_shift_within_permutation_null():
    spec = linear_spec(noise_scale=0.2)
    d_s, d_t = scm.make_domain_pair(spec, scm.DomainShift(), (12, 12), T=30, seed=1)
    xs = np.concatenate([ep.X for ep in d_s.episodes])
    xt = np.concatenate([ep.X for ep in d_t.episodes])
    rep = obj.mmd_permutation_test(xs, xt, n_permutations=100, seed=0)
    assert rep.observed <= rep.quantile(0.99)


def test_domain_pair_policy_shift_detectable():
    spec = linear_spec(noise_scale=0.2, effect_scale=2.0)
    shift = scm.DomainShift(policy=scm.LoggingPolicy([0.05, 0.8, 0.1, 0.05]))
    d_s, d_t = scm.make_domain_pair(spec, shift, (12, 12), T=40, seed=2)
    xs = np.concatenate([ep.X for ep in d_s.episodes])
    xt = np.concatenate([ep.X for ep in d_t.episodes])
    rep = obj.mmd_permutation_test(xs, xt, n_permutations=100, seed=0)
    assert rep.observed > rep.quantile(0.99)


def test_domain_pair_doubled_arm_rate():
    base_p = np.array([0.7, 0.1, 0.1, 0.1])
    target_p = np.array([0.5, 0.2, 0.15, 0.15])
    spec = linear_spec()
    spec = scm.ScmSpec(
        d_x=3, K=4, A=spec.A, B=spec.B, c=spec.c, lag=0,
        noise_scale=0.1, y_noise_scale=0.1, policy=scm.LoggingPolicy(base_p),
    )
    shift = scm.DomainShift(policy=scm.LoggingPolicy(target_p))
    n, T = 50, 60
    d_s, d_t = scm.make_domain_pair(spec, shift, (n, n), T=T, seed=3)
    rate = lambda ds: np.mean([np.mean(ep.Z == 1) for ep in ds.episodes])
    se = np.sqrt(0.2 * 0.8 / (n * T)) + np.sqrt(0.1 * 0.9 / (n * T))
    assert abs(rate(d_t) - 2 * rate(d_s)) < 3 * se + 2 * np.sqrt(0.1 * 0.9 / (n * T))


def test_domain_pair_sizes_exact():
    spec = linear_spec()
    d_s, d_t = scm.make_domain_pair(spec, scm.DomainShift(), (40, 2), T=10, seed=4)
    assert d_s.n_episodes == 40
    assert d_t.n_episodes == 2


def test_spec_json_roundtrip():
    spec = linear_spec(lag=2, transition="tanh")
    back = scm.ScmSpec.from_json(spec.to_json())
    assert np.array_equal(back.A, spec.A)
    assert np.array_equal(back.B, spec.B)
    assert back.lag == 2 and back.transition == "tanh"
    assert np.array_equal(back.policy.base_probs, spec.policy.base_probs)


def test_confounded_policy_biases_conditioning():
    # arm choice driven by the previous outcome creates a detectable gap
    # between conditional and interventional one-step means; a uniform
    # policy does not
    from cda.check import check_confounding_gap

    ok, detail = check_confounding_gap(seed=0, fast=True)
    assert ok, detail
